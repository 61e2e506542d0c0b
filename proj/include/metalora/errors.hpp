#pragma once

#include <stdexcept>
#include <string>

namespace metalora {

// Every failure surfaced by the library carries a short machine-parsable
// class tag so the CLI can emit "error class=<tag> ..." on one line.
class ml_error : public std::runtime_error {
public:
    ml_error(std::string cls, const std::string& msg)
        : std::runtime_error(msg), cls_(std::move(cls)) {}
    const std::string& error_class() const { return cls_; }

private:
    std::string cls_;
};

struct dimension_error : ml_error {
    explicit dimension_error(const std::string& msg) : ml_error("dimension", msg) {}
};

struct config_error : ml_error {
    explicit config_error(const std::string& msg) : ml_error("config", msg) {}
};

struct validation_error : ml_error {
    explicit validation_error(const std::string& msg) : ml_error("validation", msg) {}
};

struct state_error : ml_error {
    explicit state_error(const std::string& msg) : ml_error("state", msg) {}
};

struct count_error : ml_error {
    explicit count_error(const std::string& msg) : ml_error("count", msg) {}
};

struct index_error : ml_error {
    explicit index_error(const std::string& msg) : ml_error("index", msg) {}
};

// Inversion aborts when the loss leaves the finite range; the iteration
// index is part of the diagnostic.
struct diverged_error : ml_error {
    diverged_error(int64_t iteration, const std::string& msg)
        : ml_error("diverged", msg), iteration(iteration) {}
    int64_t iteration;
};

enum class io_code {
    not_found,
    write_failed,
    bad_magic,
    bad_version,
    bad_checksum,
    truncated,
    bad_layout,
};

inline const char* io_code_name(io_code c) {
    switch (c) {
        case io_code::not_found: return "io.not_found";
        case io_code::write_failed: return "io.write_failed";
        case io_code::bad_magic: return "io.bad_magic";
        case io_code::bad_version: return "io.bad_version";
        case io_code::bad_checksum: return "io.bad_checksum";
        case io_code::truncated: return "io.truncated";
        case io_code::bad_layout: return "io.bad_layout";
    }
    return "io";
}

struct io_error : ml_error {
    io_error(io_code code, const std::string& msg)
        : ml_error(io_code_name(code), msg), code(code) {}
    io_code code;
};

} // namespace metalora
