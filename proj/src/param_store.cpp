#include "avstyle/param_store.hpp"

#include <cstring>
#include <fstream>

namespace avstyle {

namespace {
constexpr char kMagic[4] = {'A', 'V', 'C', 'P'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("checkpoint: truncated file");
    return v;
}
} // namespace

bool selector_matches(Selector sel, Partition p) {
    return sel == Selector::All || p == Partition::Stylizable;
}

Tensor& ParamStore::add(const std::string& path, Tensor t, Partition p) {
    auto [it, inserted] = entries_.emplace(path, Entry{std::move(t), p});
    if (!inserted) throw UsageError("ParamStore: duplicate parameter path " + path);
    return it->second.tensor;
}

Tensor& ParamStore::at(const std::string& path) {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw UsageError("ParamStore: unknown parameter " + path);
    return it->second.tensor;
}

const Tensor& ParamStore::at(const std::string& path) const {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw UsageError("ParamStore: unknown parameter " + path);
    return it->second.tensor;
}

Partition ParamStore::partition_of(const std::string& path) const {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw UsageError("ParamStore: unknown parameter " + path);
    return it->second.partition;
}

std::vector<std::string> ParamStore::paths() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [p, e] : entries_) out.push_back(p);
    return out;
}

std::vector<std::string> ParamStore::paths(Partition p) const {
    std::vector<std::string> out;
    for (const auto& [path, e] : entries_)
        if (e.partition == p) out.push_back(path);
    return out;
}

ParamStore ParamStore::clone() const {
    ParamStore out;
    for (const auto& [path, e] : entries_)
        out.entries_.emplace(path, Entry{e.tensor.clone(), e.partition});
    return out;
}

void ParamStore::set_requires_grad(Selector sel, bool value) {
    for (auto& [path, e] : entries_)
        if (selector_matches(sel, e.partition)) e.tensor.set_requires_grad(value);
}

void ParamStore::zero_grads(Selector sel) {
    for (auto& [path, e] : entries_)
        if (selector_matches(sel, e.partition)) e.tensor.zero_grad();
}

void ParamStore::clear_grads(Selector sel) {
    for (auto& [path, e] : entries_)
        if (selector_matches(sel, e.partition)) e.tensor.clear_grad();
}

bool ParamStore::grads_ready(Selector sel) const {
    for (const auto& [path, e] : entries_)
        if (selector_matches(sel, e.partition) && !e.tensor.has_grad()) return false;
    return true;
}

void ParamStore::sgd_step(double lr, Selector sel) {
    if (!grads_ready(sel)) throw UsageError("sgd_step: missing gradients for selected partition");
    for (auto& [path, e] : entries_) {
        if (!selector_matches(sel, e.partition)) continue;
        auto data = e.tensor.data_mut();
        auto grad = e.tensor.grad();
        for (size_t i = 0; i < data.size(); ++i)
            data[i] = static_cast<float>(static_cast<double>(data[i]) - lr * static_cast<double>(grad[i]));
        e.tensor.clear_grad();
    }
}

uint64_t ParamStore::content_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [path, e] : entries_) {
        h = fnv1a64(path.data(), path.size(), h);
        const uint8_t part = e.partition == Partition::Stylizable ? 1 : 0;
        h = fnv1a64(&part, 1, h);
        for (int d : e.tensor.shape()) h = fnv1a64(&d, sizeof(d), h);
        h = fnv1a64(e.tensor.data().data(), e.tensor.data().size() * sizeof(float), h);
    }
    return h;
}

bool ParamStore::partition_equal_bits(const ParamStore& other, Partition which) const {
    for (const auto& [path, e] : entries_) {
        if (e.partition != which) continue;
        if (!other.has(path)) return false;
        const Tensor& o = other.at(path);
        if (o.shape() != e.tensor.shape()) return false;
        if (std::memcmp(o.data().data(), e.tensor.data().data(),
                        e.tensor.data().size() * sizeof(float)) != 0)
            return false;
    }
    return true;
}

void ParamStore::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot open for write: " + path);
    os.write(kMagic, 4);
    write_pod(os, kVersion);
    write_pod(os, static_cast<uint64_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
        write_pod(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(os, static_cast<uint8_t>(e.partition == Partition::Stylizable ? 1 : 0));
        write_pod(os, static_cast<uint32_t>(e.tensor.ndim()));
        for (int d : e.tensor.shape()) write_pod(os, static_cast<int32_t>(d));
        os.write(reinterpret_cast<const char*>(e.tensor.data().data()),
                 static_cast<std::streamsize>(e.tensor.data().size() * sizeof(float)));
    }
    if (!os) throw IoError("checkpoint: write failed: " + path);
}

ParamStore ParamStore::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("checkpoint: bad magic");
    const auto version = read_pod<uint32_t>(is);
    if (version != kVersion) throw IoError("checkpoint: unsupported format version");
    const auto count = read_pod<uint64_t>(is);
    ParamStore out;
    for (uint64_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto part = read_pod<uint8_t>(is);
        const auto ndim = read_pod<uint32_t>(is);
        std::vector<int> shape(ndim);
        size_t numel = 1;
        for (auto& d : shape) {
            d = read_pod<int32_t>(is);
            numel *= static_cast<size_t>(d);
        }
        std::vector<float> data(numel);
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(numel * sizeof(float)));
        if (!is) throw IoError("checkpoint: truncated tensor data");
        out.add(name, Tensor::from_data(shape, std::move(data), true),
                part ? Partition::Stylizable : Partition::Frozen);
    }
    return out;
}

} // namespace avstyle
