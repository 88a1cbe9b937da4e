#include "s2ft/io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "s2ft/error.hpp"

namespace s2ft {

void BinaryWriter::bytes(std::string_view raw) { buf_.append(raw); }

void BinaryWriter::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void BinaryWriter::u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::matrix(const Matrix& m) {
    for (double x : m.elements()) f64(x);
}

void BinaryWriter::save(const std::string& path) const { write_text_file(path, buf_); }

BinaryReader BinaryReader::from_file(const std::string& path) { return BinaryReader(read_text_file(path)); }

void BinaryReader::need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw FormatError("binary file truncated");
}

void BinaryReader::expect_magic(std::string_view magic) {
    need(magic.size());
    if (std::string_view(buf_).substr(pos_, magic.size()) != magic) {
        throw FormatError("bad magic, expected " + std::string(magic));
    }
    pos_ += magic.size();
}

std::uint32_t BinaryReader::u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
}

std::uint64_t BinaryReader::u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
}

double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

Matrix BinaryReader::matrix(std::size_t rows, std::size_t cols) {
    need(rows * cols * 8);
    std::vector<double> data(rows * cols);
    for (double& x : data) x = f64();
    try {
        return Matrix(rows, cols, std::move(data));
    } catch (const NumericError& e) {
        throw FormatError(std::string("binary matrix: ") + e.what());
    }
}

json matrix_to_json(const Matrix& m) {
    json j;
    j["rows"] = m.rows();
    j["cols"] = m.cols();
    j["data"] = std::vector<double>(m.elements().begin(), m.elements().end());
    return j;
}

Matrix matrix_from_json(const json& j) {
    try {
        return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                      j.at("data").get<std::vector<double>>());
    } catch (const json::exception& e) {
        throw FormatError(std::string("matrix json: ") + e.what());
    }
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw FormatError("write failed for " + path);
}

json read_json_file(const std::string& path) {
    try {
        return json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": " + e.what());
    }
}

void write_json_file(const std::string& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

void check_schema_version(const json& j, int expected, const char* what) {
    if (!j.is_object() || !j.contains("schema_version")) {
        throw ConfigError(std::string(what) + ": missing schema_version");
    }
    if (!j["schema_version"].is_number_integer() || j["schema_version"].get<int>() != expected) {
        throw ConfigError(std::string(what) + ": unsupported schema_version " + j["schema_version"].dump());
    }
}

std::uint64_t fingerprint(const Matrix& m) {
    BinaryWriter w;
    w.u64(m.rows());
    w.u64(m.cols());
    w.matrix(m);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : w.buffer()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t parse_hex64(const std::string& s) {
    if (s.size() != 16) throw FormatError("expected 16 hex digits, got '" + s + "'");
    std::uint64_t v = 0;
    for (char c : s) {
        v <<= 4;
        if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
        else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
        else throw FormatError("bad hex digit in '" + s + "'");
    }
    return v;
}

}  // namespace s2ft
