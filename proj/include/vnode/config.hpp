#pragma once

// Plain-text configuration: `key = value` lines grouped under bracketed
// section headers, '#' comments. A header [a.b] prefixes following keys to
// a.b.key; fully dotted keys are also accepted directly. Lookups mark keys
// consumed so builders can reject typos via unconsumed().
//
//   [train]
//   epochs = 30
//   [model.stage1.discrete]
//   out = 32

#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace vnode {

class Config {
public:
    Config() = default;

    static Config parse_string(const std::string& text, const std::string& origin = "<string>");
    static Config parse_file(const std::string& path);

    // CLI --set override; wins over file contents.
    void set(const std::string& key, const std::string& value);

    bool has(const std::string& key) const;

    std::string get_str(const std::string& key) const;
    std::string get_str(const std::string& key, const std::string& fallback) const;
    // value without marking the key consumed
    std::string peek(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<double> get_list(const std::string& key) const;

    std::vector<std::string> keys_with_prefix(const std::string& prefix) const;

    // Keys never read through a getter; builders treat these as errors.
    std::vector<std::string> unconsumed() const;
    void mark_consumed(const std::string& key) const;

    // Canonical flat re-serialization (sorted dotted keys); parses back
    // to an equivalent Config. Stored in checkpoints.
    std::string to_text() const;

    bool empty() const { return entries_.empty(); }

private:
    struct Entry {
        std::string key, value;
    };
    const Entry* find(const std::string& key) const;

    std::vector<Entry> entries_;
    mutable std::set<std::string> consumed_;
};

} // namespace vnode
