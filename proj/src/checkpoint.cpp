#include "fedrai/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace fedrai::model {

namespace {

constexpr char kMagic[4] = {'F', 'R', 'A', 'I'};

void put_u32(std::string& out, uint32_t v) {
    char b[4];
    b[0] = static_cast<char>(v & 0xff);
    b[1] = static_cast<char>((v >> 8) & 0xff);
    b[2] = static_cast<char>((v >> 16) & 0xff);
    b[3] = static_cast<char>((v >> 24) & 0xff);
    out.append(b, 4);
}

void put_f64(std::string& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    char b[8];
    for (int i = 0; i < 8; ++i) {
        b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    }
    out.append(b, 8);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    bool done() const { return pos >= buf.size(); }

    void need(size_t n, const char* what) const {
        if (pos + n > buf.size()) {
            throw IoError(std::string("truncated checkpoint while reading ") + what);
        }
    }

    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 3; i >= 0; --i) {
            v = (v << 8) | static_cast<unsigned char>(buf[pos + static_cast<size_t>(i)]);
        }
        pos += 4;
        return v;
    }

    double f64(const char* what) {
        need(8, what);
        uint64_t bits = 0;
        for (int i = 7; i >= 0; --i) {
            bits = (bits << 8) | static_cast<unsigned char>(buf[pos + static_cast<size_t>(i)]);
        }
        pos += 8;
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    std::string bytes(size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void write_adapter_checkpoint(const std::string& path, const AdapterSet& adapter) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, adapter.round_index);
    for (const auto& t : adapter.targets) {
        put_u32(out, static_cast<uint32_t>(t.name.size()));
        out.append(t.name);
        put_u32(out, static_cast<uint32_t>(t.down.rows));  // rank
        put_u32(out, static_cast<uint32_t>(t.down.cols));  // in
        put_u32(out, static_cast<uint32_t>(t.up.rows));    // out
        put_u32(out, 0);                                   // reserved
        for (double v : t.down.data) {
            put_f64(out, v);
        }
        for (double v : t.up.data) {
            put_f64(out, v);
        }
    }
    write_text_file_atomic(path, out);
}

AdapterSet read_adapter_checkpoint(const std::string& path) {
    const std::string buf = read_text_file(path);
    Reader r{buf};
    const std::string magic = r.bytes(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
        throw IoError("not an adapter checkpoint: " + path);
    }
    const uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    AdapterSet a;
    a.owner = "global";
    a.round_index = r.u32("round index");
    while (!r.done()) {
        const uint32_t name_len = r.u32("target name length");
        if (name_len == 0 || name_len > 4096) {
            throw IoError("implausible target name length in checkpoint");
        }
        AdapterTarget t;
        t.name = r.bytes(name_len, "target name");
        const uint32_t rank = r.u32("rank");
        const uint32_t in = r.u32("in dim");
        const uint32_t out = r.u32("out dim");
        const uint32_t reserved = r.u32("reserved");
        if (reserved != 0) {
            throw IoError("nonzero reserved field in checkpoint");
        }
        if (rank == 0 || in == 0 || out == 0 || rank > (1u << 16) || in > (1u << 20) ||
            out > (1u << 20)) {
            throw IoError("implausible adapter dims in checkpoint");
        }
        t.down = Matrix(rank, in);
        for (auto& v : t.down.data) {
            v = r.f64("A entry");
        }
        t.up = Matrix(out, rank);
        for (auto& v : t.up.data) {
            v = r.f64("B entry");
        }
        a.targets.push_back(std::move(t));
    }
    return a;
}

}  // namespace fedrai::model
