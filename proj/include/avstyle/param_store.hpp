#pragma once

#include <map>
#include <string>
#include <vector>

#include "avstyle/tensor.hpp"

namespace avstyle {

enum class Partition { Stylizable, Frozen };
enum class Selector { Stylizable, All };

/// Named parameter map with a total stylizable/frozen partition. Paths are
/// unique dotted names; iteration order is lexicographic (std::map), which
/// fixes the order of every bulk operation.
class ParamStore {
public:
    struct Entry {
        Tensor tensor;
        Partition partition;
    };

    Tensor& add(const std::string& path, Tensor t, Partition p);
    bool has(const std::string& path) const { return entries_.count(path) != 0; }
    Tensor& at(const std::string& path);
    const Tensor& at(const std::string& path) const;
    Partition partition_of(const std::string& path) const;

    size_t count() const { return entries_.size(); }
    std::vector<std::string> paths() const;
    std::vector<std::string> paths(Partition p) const;

    ParamStore clone() const;

    void set_requires_grad(Selector sel, bool value);
    void zero_grads(Selector sel);
    void clear_grads(Selector sel);
    bool grads_ready(Selector sel) const;

    // p <- f32(f64(p) - lr * f64(grad)) for the selected partition, frozen
    // partition untouched bit-for-bit; grads of the selection cleared after.
    void sgd_step(double lr, Selector sel);

    uint64_t content_hash() const;
    bool partition_equal_bits(const ParamStore& other, Partition which) const;

    void save(const std::string& path) const;
    static ParamStore load(const std::string& path);

    template <typename Fn>
    void for_each(Fn&& fn) {
        for (auto& [path, e] : entries_) fn(path, e);
    }
    template <typename Fn>
    void for_each(Fn&& fn) const {
        for (const auto& [path, e] : entries_) fn(path, e);
    }

private:
    std::map<std::string, Entry> entries_;
};

bool selector_matches(Selector sel, Partition p);

} // namespace avstyle
