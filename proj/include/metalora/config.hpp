#pragma once

#include <map>
#include <string>
#include <vector>

namespace metalora {

// Sectioned key = value configuration text. '#' and ';' start comments.
// Keys are addressed as "section.key"; keys before any [section] live in
// the "" section.
class ConfigFile {
public:
    ConfigFile() = default;

    static ConfigFile parse(const std::string& text);
    static ConfigFile load(const std::string& path);

    bool has(const std::string& key) const;
    std::string get_str(const std::string& key, const std::string& fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    double get_real(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    void set(const std::string& key, const std::string& value);

    // Deterministic serialization: sections and keys in insertion order.
    std::string to_text() const;

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

private:
    std::vector<std::pair<std::string, std::string>> entries_; // ordered
    std::map<std::string, size_t> index_;
};

} // namespace metalora
