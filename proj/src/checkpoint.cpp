#include "voxfuse/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "voxfuse/errors.hpp"

namespace voxfuse {

namespace {

constexpr char kMagic[4] = {'V', 'X', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    std::string buf;
    size_t pos = 0;
    const std::string& path;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw FormatError("truncated tensor file: " + path);
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(buf[pos++]);
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void save_tensor_file(const std::string& path, const std::vector<NamedTensor>& entries,
                      bool as_f32, uint64_t step) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u64(out, step);
    put_u32(out, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, value] : entries) {
        put_u32(out, static_cast<uint32_t>(name.size()));
        out.append(name);
        out.push_back(as_f32 ? 1 : 0);
        put_u32(out, static_cast<uint32_t>(value.ndim()));
        for (int d = 0; d < value.ndim(); ++d) put_u32(out, static_cast<uint32_t>(value.dim(d)));
        for (size_t i = 0; i < value.size(); ++i) {
            if (as_f32) {
                put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(value[i])));
            } else {
                put_u64(out, std::bit_cast<uint64_t>(value[i]));
            }
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError("write failed: " + path);
}

TensorFile load_tensor_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r{std::move(buf), 0, path};

    if (r.bytes(4) != std::string(kMagic, 4)) throw FormatError("not a tensor file: " + path);
    if (r.u32() != kVersion) throw FormatError("unsupported tensor file version: " + path);
    TensorFile out;
    out.step = r.u64();
    const uint32_t count = r.u32();
    out.entries.reserve(count);
    for (uint32_t e = 0; e < count; ++e) {
        NamedTensor nt;
        nt.name = r.bytes(r.u32());
        const uint8_t dtype = r.u8();
        if (dtype > 1) throw FormatError("unknown dtype in tensor file: " + path);
        const uint32_t ndim = r.u32();
        if (ndim > 8) throw FormatError("implausible tensor rank in: " + path);
        std::vector<int> shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(r.u32());
        Tensor t(shape);
        for (size_t i = 0; i < t.size(); ++i) {
            if (dtype == 1) {
                t[i] = static_cast<double>(std::bit_cast<float>(r.u32()));
            } else {
                t[i] = std::bit_cast<double>(r.u64());
            }
        }
        nt.value = std::move(t);
        out.entries.push_back(std::move(nt));
    }
    if (r.pos != r.buf.size()) throw FormatError("trailing bytes in tensor file: " + path);
    return out;
}

void save_checkpoint(const std::string& path, const ParamStore& ps, bool as_f32,
                     bool with_moments) {
    std::vector<NamedTensor> entries;
    entries.reserve(static_cast<size_t>(ps.count()) * (with_moments ? 3 : 1));
    for (int i = 0; i < ps.count(); ++i) {
        const ParamEntry& e = ps.entry(i);
        entries.push_back({e.name, e.value});
        if (with_moments) {
            entries.push_back({e.name + "#m", e.m});
            entries.push_back({e.name + "#v", e.v});
        }
    }
    save_tensor_file(path, entries, as_f32, static_cast<uint64_t>(ps.step_count()));
}

void load_checkpoint(const std::string& path, ParamStore& ps) {
    const TensorFile file = load_tensor_file(path);
    std::vector<bool> seen(static_cast<size_t>(ps.count()), false);
    for (const auto& [name, value] : file.entries) {
        std::string base = name;
        int slot = 0;  // 0 value, 1 m, 2 v
        if (base.size() > 2 && base[base.size() - 2] == '#') {
            const char tag = base.back();
            if (tag == 'm') slot = 1;
            else if (tag == 'v') slot = 2;
            if (slot != 0) base.resize(base.size() - 2);
        }
        const int idx = ps.find(base);
        if (idx < 0) throw FormatError("checkpoint entry has no matching parameter: " + name);
        ParamEntry& e = ps.entry(idx);
        if (!e.value.same_shape(value))
            throw FormatError("checkpoint shape mismatch for parameter: " + name);
        if (slot == 0) {
            e.value = value;
            seen[static_cast<size_t>(idx)] = true;
        } else if (slot == 1) {
            e.m = value;
        } else {
            e.v = value;
        }
    }
    for (int i = 0; i < ps.count(); ++i) {
        if (!seen[static_cast<size_t>(i)])
            throw FormatError("checkpoint is missing parameter: " + ps.entry(i).name);
    }
    ps.set_step_count(static_cast<int64_t>(file.step));
}

}  // namespace voxfuse
