#include "tnx/archive.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace tnx {

namespace {

constexpr char kMagic[4] = {'T', 'N', 'X', 'T'};
constexpr std::uint32_t kVersion = 1;

class Cursor {
public:
    Cursor(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}

    void read(void* dst, std::size_t n, const std::string& what) {
        if (pos_ + n > size_)
            throw IoError("archive truncated while reading " + what);
        std::memcpy(dst, data_ + pos_, n);
        pos_ += n;
    }
    template <typename V>
    V read_scalar(const std::string& what) {
        V v;
        read(&v, sizeof(V), what);
        return v;
    }
    bool done() const { return pos_ == size_; }

private:
    const unsigned char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<ArchiveEntry> read_archive(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open archive '" + path + "'");
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    Cursor cur(buf.data(), buf.size());

    char magic[4];
    cur.read(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("archive '" + path + "' has bad magic (expected TNXT)");
    const auto version = cur.read_scalar<std::uint32_t>("version");
    if (version != kVersion)
        throw IoError("archive version " + std::to_string(version) + " unsupported (want 1)");
    const auto count = cur.read_scalar<std::uint32_t>("tensor count");

    std::vector<ArchiveEntry> entries;
    entries.reserve(count);
    std::string prev_name;
    for (std::uint32_t t = 0; t < count; ++t) {
        ArchiveEntry e;
        const auto name_len = cur.read_scalar<std::uint16_t>("name length");
        e.name.resize(name_len);
        cur.read(e.name.data(), name_len, "tensor name");
        e.dtype = cur.read_scalar<std::uint8_t>("dtype of '" + e.name + "'");
        if (e.dtype > 1)
            throw IoError("tensor '" + e.name + "' has unknown dtype code " +
                          std::to_string(e.dtype));
        const auto rank = cur.read_scalar<std::uint8_t>("rank of '" + e.name + "'");
        if (rank > 8) throw IoError("tensor '" + e.name + "' rank is implausible");
        e.extents.resize(rank);
        std::uint64_t n = 1;
        for (std::uint8_t r = 0; r < rank; ++r) {
            e.extents[r] = cur.read_scalar<std::uint64_t>("extent of '" + e.name + "'");
            if (e.extents[r] == 0) throw IoError("tensor '" + e.name + "' has zero extent");
            n *= e.extents[r];
        }
        const std::size_t elem = e.dtype == 0 ? 4 : 8;
        e.payload.resize(n * elem);
        cur.read(e.payload.data(), e.payload.size(), "payload of '" + e.name + "'");
        if (t > 0 && !(prev_name < e.name))
            throw IoError("archive tensors not in sorted-name order at '" + e.name + "'");
        prev_name = e.name;
        entries.push_back(std::move(e));
    }
    if (!cur.done()) throw IoError("archive '" + path + "' has trailing bytes");
    return entries;
}

void write_archive(const std::string& path, std::vector<ArchiveEntry> entries) {
    std::sort(entries.begin(), entries.end(),
              [](const ArchiveEntry& a, const ArchiveEntry& b) { return a.name < b.name; });
    for (std::size_t i = 1; i < entries.size(); ++i)
        if (entries[i - 1].name == entries[i].name)
            throw IoError("duplicate tensor name '" + entries[i].name + "'");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write archive '" + path + "'");
    out.write(kMagic, 4);
    const std::uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    const auto count = static_cast<std::uint32_t>(entries.size());
    out.write(reinterpret_cast<const char*>(&count), 4);
    for (const auto& e : entries) {
        if (e.name.size() > 0xffff) throw IoError("tensor name too long: " + e.name);
        const auto name_len = static_cast<std::uint16_t>(e.name.size());
        out.write(reinterpret_cast<const char*>(&name_len), 2);
        out.write(e.name.data(), name_len);
        out.write(reinterpret_cast<const char*>(&e.dtype), 1);
        const auto rank = static_cast<std::uint8_t>(e.extents.size());
        out.write(reinterpret_cast<const char*>(&rank), 1);
        for (auto ext : e.extents) out.write(reinterpret_cast<const char*>(&ext), 8);
        out.write(reinterpret_cast<const char*>(e.payload.data()),
                  static_cast<std::streamsize>(e.payload.size()));
    }
    if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace tnx
