#pragma once

// Parameter checkpoint container: named dense arrays with shapes behind a
// format-version header. Layout (little-endian, byte-exact):
//
//   magic   8 bytes  "CASCKPT\0"
//   version u32      currently 1
//   count   u64      number of entries
//   entry*  count times:
//     name_len u32, name bytes (no terminator)
//     dtype    u8   0 = float64, 1 = float32
//     ndim     u32, dims u32[ndim]
//     data     dtype-sized scalars, row-major, prod(dims) of them
//
// Entries are written in registration order, so files are stable across runs.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cas/adam.hpp"
#include "cas/common.hpp"
#include "cas/tensor.hpp"

namespace cas {

namespace ckpt {

constexpr char MAGIC[8] = {'C', 'A', 'S', 'C', 'K', 'P', 'T', '\0'};
constexpr uint32_t VERSION = 1;

struct entry {
    std::string name;
    shape_t shape;
    std::vector<double> data;  // held as f64 in memory regardless of file dtype
    uint8_t dtype = 0;
};

inline void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

template <class S>
void save(const std::string& path, const std::vector<entry>& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw data_error("checkpoint: cannot open for write: " + path);
    os.write(MAGIC, 8);
    write_u32(os, VERSION);
    write_u64(os, entries.size());
    const uint8_t dtype = sizeof(S) == 8 ? 0 : 1;
    for (const auto& e : entries) {
        write_u32(os, static_cast<uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        os.put(static_cast<char>(dtype));
        write_u32(os, static_cast<uint32_t>(e.shape.size()));
        for (int d : e.shape) write_u32(os, static_cast<uint32_t>(d));
        if (dtype == 0) {
            os.write(reinterpret_cast<const char*>(e.data.data()),
                     static_cast<std::streamsize>(e.data.size() * sizeof(double)));
        } else {
            std::vector<float> f(e.data.begin(), e.data.end());
            os.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
        }
    }
    if (!os) throw data_error("checkpoint: write failure: " + path);
}

inline std::vector<entry> load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, MAGIC, 8) != 0) throw data_error("checkpoint: bad magic in " + path);
    const uint32_t version = read_u32(is);
    if (version != VERSION)
        throw data_error("checkpoint: unsupported format version " + std::to_string(version) + " in " + path);
    const uint64_t count = read_u64(is);
    std::vector<entry> out;
    out.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        entry e;
        const uint32_t name_len = read_u32(is);
        e.name.resize(name_len);
        is.read(e.name.data(), name_len);
        e.dtype = static_cast<uint8_t>(is.get());
        const uint32_t ndim = read_u32(is);
        size_t n = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            e.shape.push_back(static_cast<int>(read_u32(is)));
            n *= static_cast<size_t>(e.shape.back());
        }
        e.data.resize(n);
        if (e.dtype == 0) {
            is.read(reinterpret_cast<char*>(e.data.data()), static_cast<std::streamsize>(n * sizeof(double)));
        } else if (e.dtype == 1) {
            std::vector<float> f(n);
            is.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(n * sizeof(float)));
            for (size_t j = 0; j < n; ++j) e.data[j] = static_cast<double>(f[j]);
        } else {
            throw data_error("checkpoint: unknown dtype " + std::to_string(e.dtype) + " in " + path);
        }
        if (!is) throw data_error("checkpoint: truncated file: " + path);
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace ckpt

// Serialize a parameter store (and optionally its Adam state) to entries.
template <class S>
std::vector<ckpt::entry> checkpoint_entries(const param_store<S>& ps, const adam_state<S>* opt = nullptr,
                                            const std::string& prefix = "") {
    std::vector<ckpt::entry> out;
    for (size_t i = 0; i < ps.params.size(); ++i) {
        ckpt::entry e;
        e.name = prefix + ps.names[i];
        e.shape = ps.params[i].shape();
        e.data.assign(ps.params[i].value().begin(), ps.params[i].value().end());
        out.push_back(std::move(e));
    }
    if (opt) {
        for (size_t i = 0; i < ps.params.size(); ++i) {
            ckpt::entry em;
            em.name = prefix + ps.names[i] + ".adam_m";
            em.shape = ps.params[i].shape();
            em.data.assign(opt->m[i].begin(), opt->m[i].end());
            out.push_back(std::move(em));
            ckpt::entry ev;
            ev.name = prefix + ps.names[i] + ".adam_v";
            ev.shape = ps.params[i].shape();
            ev.data.assign(opt->v[i].begin(), opt->v[i].end());
            out.push_back(std::move(ev));
        }
        ckpt::entry es;
        es.name = prefix + "adam.step";
        es.shape = {1};
        es.data = {static_cast<double>(opt->step)};
        out.push_back(std::move(es));
    }
    return out;
}

template <class S>
void restore_params(param_store<S>& ps, const std::vector<ckpt::entry>& entries, adam_state<S>* opt = nullptr,
                    const std::string& prefix = "") {
    std::map<std::string, const ckpt::entry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    for (size_t i = 0; i < ps.params.size(); ++i) {
        auto it = by_name.find(prefix + ps.names[i]);
        if (it == by_name.end()) throw data_error("checkpoint: missing array " + prefix + ps.names[i]);
        const ckpt::entry& e = *it->second;
        if (e.shape != ps.params[i].shape())
            throw data_error("checkpoint: shape mismatch for " + e.name + ": file " + shape_str(e.shape) +
                             " vs model " + shape_str(ps.params[i].shape()));
        auto& dst = ps.params[i].value();
        for (size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<S>(e.data[j]);
        if (opt) {
            auto im = by_name.find(prefix + ps.names[i] + ".adam_m");
            auto iv = by_name.find(prefix + ps.names[i] + ".adam_v");
            if (im != by_name.end() && iv != by_name.end()) {
                for (size_t j = 0; j < dst.size(); ++j) {
                    opt->m[i][j] = static_cast<S>(im->second->data[j]);
                    opt->v[i][j] = static_cast<S>(iv->second->data[j]);
                }
            }
        }
    }
    if (opt) {
        auto is = by_name.find(prefix + "adam.step");
        if (is != by_name.end()) opt->step = static_cast<long>(is->second->data[0]);
    }
}

}  // namespace cas
