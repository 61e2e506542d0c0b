#include "metalora/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "metalora/errors.hpp"
#include "metalora/util.hpp"

namespace metalora {

std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

} // namespace

ConfigFile ConfigFile::parse(const std::string& text) {
    ConfigFile cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t cpos = line.find_first_of("#;");
        if (cpos != std::string::npos) line = line.substr(0, cpos);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw config_error("config line " + std::to_string(lineno) + ": unclosed section");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw config_error("config line " + std::to_string(lineno) + ": empty key");
        cfg.set(section.empty() ? key : section + "." + key, value);
    }
    return cfg;
}

ConfigFile ConfigFile::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error(io_code::not_found, "cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

bool ConfigFile::has(const std::string& key) const { return index_.count(key) > 0; }

std::string ConfigFile::get_str(const std::string& key, const std::string& fallback) const {
    auto it = index_.find(key);
    return it == index_.end() ? fallback : entries_[it->second].second;
}

int64_t ConfigFile::get_int(const std::string& key, int64_t fallback) const {
    auto it = index_.find(key);
    if (it == index_.end()) return fallback;
    try {
        return std::stoll(entries_[it->second].second);
    } catch (const std::exception&) {
        throw config_error("config key " + key + " is not an integer");
    }
}

double ConfigFile::get_real(const std::string& key, double fallback) const {
    auto it = index_.find(key);
    if (it == index_.end()) return fallback;
    try {
        return std::stod(entries_[it->second].second);
    } catch (const std::exception&) {
        throw config_error("config key " + key + " is not a number");
    }
}

bool ConfigFile::get_bool(const std::string& key, bool fallback) const {
    auto it = index_.find(key);
    if (it == index_.end()) return fallback;
    const std::string& v = entries_[it->second].second;
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw config_error("config key " + key + " is not a boolean");
}

void ConfigFile::set(const std::string& key, const std::string& value) {
    auto it = index_.find(key);
    if (it != index_.end()) {
        entries_[it->second].second = value;
        return;
    }
    index_[key] = entries_.size();
    entries_.emplace_back(key, value);
}

std::string ConfigFile::to_text() const {
    // Group by section (first-appearance order) so reparsing is lossless.
    std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> groups;
    std::map<std::string, size_t> group_index;
    for (const auto& [key, value] : entries_) {
        size_t dot = key.rfind('.');
        std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
        std::string k = dot == std::string::npos ? key : key.substr(dot + 1);
        auto it = group_index.find(sec);
        if (it == group_index.end()) {
            group_index[sec] = groups.size();
            groups.push_back({sec, {}});
            it = group_index.find(sec);
        }
        groups[it->second].second.emplace_back(k, value);
    }
    // Unsectioned keys must precede any [section] header to reparse as such.
    std::stable_partition(groups.begin(), groups.end(),
                          [](const auto& g) { return g.first.empty(); });
    std::ostringstream os;
    bool first = true;
    for (const auto& [sec, kvs] : groups) {
        if (!first) os << "\n";
        if (!sec.empty()) os << "[" << sec << "]\n";
        for (const auto& [k, v] : kvs) os << k << " = " << v << "\n";
        first = false;
    }
    return os.str();
}

} // namespace metalora
