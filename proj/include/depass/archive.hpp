#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "depass/errors.hpp"
#include "depass/io_util.hpp"
#include "depass/tensor.hpp"

namespace depass {

static_assert(std::endian::native == std::endian::little, "archive blob is little-endian raw");

enum class Dtype { f32, f64 };

inline std::size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 8; }
inline std::string dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }
inline Dtype dtype_from_name(const std::string& s) {
    if (s == "f32") return Dtype::f32;
    if (s == "f64") return Dtype::f64;
    throw ArchiveError("unknown dtype in manifest: " + s);
}

template <typename T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::f32; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::f64; }

struct TensorEntry {
    std::string name;
    Dtype dtype = Dtype::f32;
    std::vector<std::size_t> shape;
    std::vector<unsigned char> bytes;

    std::size_t numel() const {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }
};

/// Manifest + blob container. Layout: u64 LE manifest byte length, UTF-8
/// manifest text, then the raw little-endian blob. Manifest lines:
///   depass.archive.v1
///   meta <key> <pct-encoded value>
///   tensor <name> <dtype> <ndim> <dims...> <offset> <nbytes>
///   end
class TensorArchive {
public:
    std::map<std::string, std::string> meta;

    bool has_tensor(const std::string& name) const { return index_.count(name) > 0; }

    const std::vector<TensorEntry>& tensors() const { return entries_; }

    const TensorEntry& tensor(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ArchiveError("archive has no tensor named '" + name + "'");
        return entries_[it->second];
    }

    template <typename T>
    void add(const std::string& name, std::vector<std::size_t> shape, const T* data) {
        TensorEntry e;
        e.name = name;
        e.dtype = dtype_of<T>();
        e.shape = std::move(shape);
        e.bytes.resize(e.numel() * sizeof(T));
        std::memcpy(e.bytes.data(), data, e.bytes.size());
        if (index_.count(name)) throw ArchiveError("duplicate tensor name: " + name);
        index_[name] = entries_.size();
        entries_.push_back(std::move(e));
    }

    template <typename T>
    void add(const std::string& name, const Matrix<T>& m) {
        add(name, {m.rows(), m.cols()}, m.data());
    }

    template <typename T>
    void add(const std::string& name, const std::vector<T>& v) {
        add(name, {v.size()}, v.data());
    }

    template <typename T>
    void add(const std::string& name, const Tensor3<T>& t) {
        add(name, {t.dim0(), t.dim1(), t.dim2()}, t.data());
    }

    template <typename T>
    std::vector<T> values(const std::string& name) const {
        const TensorEntry& e = tensor(name);
        if (e.dtype != dtype_of<T>()) {
            throw ArchiveError("tensor '" + name + "' has dtype " + dtype_name(e.dtype) +
                               ", requested " + dtype_name(dtype_of<T>()));
        }
        std::vector<T> out(e.numel());
        std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
        return out;
    }

    template <typename T>
    Matrix<T> matrix(const std::string& name) const {
        const TensorEntry& e = tensor(name);
        if (e.shape.size() != 2) throw ArchiveError("tensor '" + name + "' is not rank-2");
        Matrix<T> m(e.shape[0], e.shape[1]);
        std::vector<T> v = values<T>(name);
        std::memcpy(m.data(), v.data(), v.size() * sizeof(T));
        return m;
    }

    std::string serialize() const {
        std::ostringstream manifest;
        manifest << "depass.archive.v1\n";
        for (const auto& [k, v] : meta) manifest << "meta " << pct_encode(k) << " " << pct_encode(v) << "\n";
        std::size_t offset = 0;
        for (const TensorEntry& e : entries_) {
            manifest << "tensor " << e.name << " " << dtype_name(e.dtype) << " " << e.shape.size();
            for (std::size_t d : e.shape) manifest << " " << d;
            manifest << " " << offset << " " << e.bytes.size() << "\n";
            offset += e.bytes.size();
        }
        manifest << "end\n";
        std::string header = manifest.str();

        std::string out;
        out.resize(8);
        std::uint64_t len = header.size();
        for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((len >> (8 * i)) & 0xFF);
        out += header;
        for (const TensorEntry& e : entries_) {
            out.append(reinterpret_cast<const char*>(e.bytes.data()), e.bytes.size());
        }
        return out;
    }

    void save(const std::string& path) const { atomic_write_file(path, serialize()); }

    static TensorArchive deserialize(const std::string& raw) {
        if (raw.size() < 8) throw ArchiveError("archive shorter than its length prefix");
        std::uint64_t mlen = 0;
        for (int i = 0; i < 8; ++i) mlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[i])) << (8 * i);
        if (8 + mlen > raw.size()) throw ArchiveError("manifest length exceeds file size");
        std::string manifest = raw.substr(8, mlen);
        std::size_t blob_off = 8 + mlen;
        std::size_t blob_len = raw.size() - blob_off;

        TensorArchive a;
        std::istringstream lines(manifest);
        std::string line;
        if (!std::getline(lines, line) || line != "depass.archive.v1") {
            throw ArchiveError("bad archive magic line");
        }
        bool saw_end = false;
        std::uint64_t expected_offset = 0;
        struct Pending {
            TensorEntry entry;
            std::uint64_t offset;
        };
        std::vector<Pending> pending;
        while (std::getline(lines, line)) {
            if (line == "end") {
                saw_end = true;
                break;
            }
            std::istringstream ls(line);
            std::string kind;
            ls >> kind;
            if (kind == "meta") {
                std::string k, v;
                ls >> k >> v;
                if (ls.fail()) throw ArchiveError("malformed meta line: " + line);
                a.meta[pct_decode(k)] = pct_decode(v);
            } else if (kind == "tensor") {
                Pending p;
                std::string dtype;
                std::size_t ndim = 0;
                ls >> p.entry.name >> dtype >> ndim;
                if (ls.fail()) throw ArchiveError("malformed tensor line: " + line);
                p.entry.dtype = dtype_from_name(dtype);
                p.entry.shape.resize(ndim);
                for (std::size_t i = 0; i < ndim; ++i) ls >> p.entry.shape[i];
                std::uint64_t nbytes = 0;
                ls >> p.offset >> nbytes;
                if (ls.fail()) throw ArchiveError("malformed tensor line: " + line);
                if (nbytes != p.entry.numel() * dtype_size(p.entry.dtype)) {
                    throw ArchiveError("tensor '" + p.entry.name + "' byte length does not match its shape");
                }
                if (p.offset != expected_offset) {
                    throw ArchiveError("tensor '" + p.entry.name +
                                       "' offset is not contiguous with the previous tensor");
                }
                expected_offset = p.offset + nbytes;
                pending.push_back(std::move(p));
            } else {
                throw ArchiveError("unknown manifest record: " + line);
            }
        }
        if (!saw_end) throw ArchiveError("manifest missing end marker");
        if (expected_offset != blob_len) {
            throw ArchiveError("blob length " + std::to_string(blob_len) + " does not equal manifest total " +
                               std::to_string(expected_offset));
        }
        for (Pending& p : pending) {
            std::size_t nbytes = p.entry.numel() * dtype_size(p.entry.dtype);
            p.entry.bytes.resize(nbytes);
            std::memcpy(p.entry.bytes.data(), raw.data() + blob_off + p.offset, nbytes);
            a.index_[p.entry.name] = a.entries_.size();
            a.entries_.push_back(std::move(p.entry));
        }
        return a;
    }

    static TensorArchive load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw ArchiveError("cannot open archive: " + path);
        std::ostringstream ss;
        ss << f.rdbuf();
        return deserialize(ss.str());
    }

private:
    std::vector<TensorEntry> entries_;
    std::map<std::string, std::size_t> index_;

    static std::string pct_encode(const std::string& s) {
        static const char* hex = "0123456789ABCDEF";
        std::string out;
        for (unsigned char c : s) {
            if (c <= 0x20 || c == '%' || c == 0x7F) {
                out += '%';
                out += hex[c >> 4];
                out += hex[c & 0xF];
            } else {
                out += static_cast<char>(c);
            }
        }
        if (out.empty()) out = "%00";
        return out;
    }

    static std::string pct_decode(const std::string& s) {
        std::string out;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] != '%') {
                out += s[i];
                continue;
            }
            if (i + 2 >= s.size()) throw ArchiveError("truncated percent escape");
            auto nib = [](char c) -> int {
                if (c >= '0' && c <= '9') return c - '0';
                if (c >= 'A' && c <= 'F') return c - 'A' + 10;
                if (c >= 'a' && c <= 'f') return c - 'a' + 10;
                throw ArchiveError("bad percent escape digit");
            };
            unsigned char v = static_cast<unsigned char>(nib(s[i + 1]) * 16 + nib(s[i + 2]));
            if (v != 0) out += static_cast<char>(v);  // %00 marks the empty string
            i += 2;
        }
        return out;
    }
};

}  // namespace depass
