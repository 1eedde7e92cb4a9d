#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace genimg {

// Flat sectioned config: `[section]` headers, `key = value` lines, `#` or `;`
// comments. Keys are unique within a section. All lookups throw ConfigError
// when the key is missing or the value does not parse.
class IniConfig {
public:
    static IniConfig parse_string(const std::string& text);
    static IniConfig parse_file(const std::string& path);

    bool has(const std::string& section, const std::string& key) const;
    const std::string& get(const std::string& section, const std::string& key) const;
    std::string get_or(const std::string& section, const std::string& key,
                       const std::string& fallback) const;

    int64_t get_int(const std::string& section, const std::string& key) const;
    int64_t get_int_or(const std::string& section, const std::string& key, int64_t fallback) const;
    double get_double(const std::string& section, const std::string& key) const;
    double get_double_or(const std::string& section, const std::string& key,
                         double fallback) const;
    bool get_bool_or(const std::string& section, const std::string& key, bool fallback) const;
    std::vector<int64_t> get_int_list(const std::string& section, const std::string& key) const;

    void set(const std::string& section, const std::string& key, const std::string& value);
    // "section.key=value"; throws ConfigError when malformed.
    void apply_override(const std::string& assignment);

    std::vector<std::string> sections() const;
    std::vector<std::string> keys(const std::string& section) const;

    // Sorted sections and keys, one `key = value` per line: the canonical
    // serialization the config hash is computed over.
    std::string canonical_text() const;
    uint64_t hash() const;  // FNV-1a 64 over canonical_text()

private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
};

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 14695981039346656037ull);
uint64_t fnv1a64(const std::string& s);

// A validated training configuration: the raw config plus the sections every
// trainer shares. Model-specific keys stay in `ini` and are validated by the
// trainer that consumes them.
struct TrainingConfig {
    IniConfig ini;

    // [run]
    int64_t epochs = 1;
    int64_t batch_size = 8;
    uint64_t seed = 0;
    std::string out_dir;

    // [data]
    std::string manifest_path;
    std::string train_split = "train";
    bool use_captions = false;

    static TrainingConfig load(const std::string& path,
                               const std::vector<std::string>& overrides = {});
    static TrainingConfig from_ini(IniConfig ini);

    uint64_t hash() const { return ini.hash(); }
};

}  // namespace genimg
