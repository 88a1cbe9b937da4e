#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "s2ft/linalg.hpp"

namespace s2ft {

using json = nlohmann::ordered_json;

/// Little-endian byte sink, independent of host byte order.
class BinaryWriter {
public:
    void bytes(std::string_view raw);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void matrix(const Matrix& m);  // elements only, row-major
    const std::string& buffer() const { return buf_; }
    void save(const std::string& path) const;

private:
    std::string buf_;
};

class BinaryReader {
public:
    explicit BinaryReader(std::string data) : buf_(std::move(data)) {}
    static BinaryReader from_file(const std::string& path);

    void expect_magic(std::string_view magic);
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    Matrix matrix(std::size_t rows, std::size_t cols);
    bool at_end() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const;
    std::string buf_;
    std::size_t pos_ = 0;
};

json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const json& j);

json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const json& j);
void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

/// Throws ConfigError unless j["schema_version"] exists and equals `expected`.
void check_schema_version(const json& j, int expected, const char* what);

/// FNV-1a 64-bit over the little-endian bytes of the shape and elements.
std::uint64_t fingerprint(const Matrix& m);
std::string hex64(std::uint64_t v);
std::uint64_t parse_hex64(const std::string& s);

}  // namespace s2ft
