#include "genimg/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "genimg/errors.hpp"

namespace genimg {

namespace {

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(uint8_t(s[b]))) ++b;
    while (e > b && std::isspace(uint8_t(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

}  // namespace

IniConfig IniConfig::parse_string(const std::string& text) {
    IniConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']' || t.size() < 3) {
                throw ConfigError("bad section header at line " + std::to_string(line_no));
            }
            section = trim(t.substr(1, t.size() - 2));
            cfg.sections_[section];  // a section may legitimately stay empty
            continue;
        }
        const size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("expected key = value at line " + std::to_string(line_no));
        }
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.empty()) throw ConfigError("empty key at line " + std::to_string(line_no));
        if (section.empty()) {
            throw ConfigError("key '" + key + "' appears before any [section]");
        }
        auto& sec = cfg.sections_[section];
        if (sec.count(key)) {
            throw ConfigError("duplicate key '" + section + "." + key + "'");
        }
        sec[key] = value;
    }
    return cfg;
}

IniConfig IniConfig::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config '" + path + "'");
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_string(buf.str());
}

bool IniConfig::has(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key) > 0;
}

const std::string& IniConfig::get(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    if (it == sections_.end() || !it->second.count(key)) {
        throw ConfigError("missing config key '" + section + "." + key + "'");
    }
    return it->second.at(key);
}

std::string IniConfig::get_or(const std::string& section, const std::string& key,
                              const std::string& fallback) const {
    return has(section, key) ? get(section, key) : fallback;
}

int64_t IniConfig::get_int(const std::string& section, const std::string& key) const {
    const std::string& v = get(section, key);
    try {
        size_t used = 0;
        const int64_t r = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("'" + section + "." + key + "' = '" + v + "' is not an integer");
    }
}

int64_t IniConfig::get_int_or(const std::string& section, const std::string& key,
                              int64_t fallback) const {
    return has(section, key) ? get_int(section, key) : fallback;
}

double IniConfig::get_double(const std::string& section, const std::string& key) const {
    const std::string& v = get(section, key);
    try {
        size_t used = 0;
        const double r = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("'" + section + "." + key + "' = '" + v + "' is not a number");
    }
}

double IniConfig::get_double_or(const std::string& section, const std::string& key,
                                double fallback) const {
    return has(section, key) ? get_double(section, key) : fallback;
}

bool IniConfig::get_bool_or(const std::string& section, const std::string& key,
                            bool fallback) const {
    if (!has(section, key)) return fallback;
    const std::string& v = get(section, key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("'" + section + "." + key + "' = '" + v + "' is not a boolean");
}

std::vector<int64_t> IniConfig::get_int_list(const std::string& section,
                                             const std::string& key) const {
    const std::string& v = get(section, key);
    std::vector<int64_t> out;
    std::istringstream in(v);
    std::string tok;
    while (std::getline(in, tok, ',')) {
        const std::string t = trim(tok);
        if (t.empty()) continue;
        try {
            size_t used = 0;
            out.push_back(std::stoll(t, &used));
            if (used != t.size()) throw std::invalid_argument(t);
        } catch (const std::exception&) {
            throw ConfigError("'" + section + "." + key + "' = '" + v +
                              "' is not a comma-separated integer list");
        }
    }
    if (out.empty()) throw ConfigError("'" + section + "." + key + "' is an empty list");
    return out;
}

void IniConfig::set(const std::string& section, const std::string& key,
                    const std::string& value) {
    if (section.empty() || key.empty()) throw ConfigError("set needs a section and a key");
    sections_[section][key] = value;
}

void IniConfig::apply_override(const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("override '" + assignment + "' is not section.key=value");
    }
    const std::string lhs = trim(assignment.substr(0, eq));
    const std::string value = trim(assignment.substr(eq + 1));
    const size_t dot = lhs.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == lhs.size()) {
        throw ConfigError("override '" + assignment + "' is not section.key=value");
    }
    set(lhs.substr(0, dot), lhs.substr(dot + 1), value);
}

std::vector<std::string> IniConfig::sections() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : sections_) out.push_back(name);
    return out;
}

std::vector<std::string> IniConfig::keys(const std::string& section) const {
    std::vector<std::string> out;
    auto it = sections_.find(section);
    if (it == sections_.end()) return out;
    for (const auto& [key, _] : it->second) out.push_back(key);
    return out;
}

std::string IniConfig::canonical_text() const {
    std::ostringstream out;  // std::map already iterates in sorted order
    for (const auto& [name, sec] : sections_) {
        out << "[" << name << "]\n";
        for (const auto& [key, value] : sec) out << key << " = " << value << "\n";
    }
    return out.str();
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

uint64_t IniConfig::hash() const { return fnv1a64(canonical_text()); }

TrainingConfig TrainingConfig::load(const std::string& path,
                                    const std::vector<std::string>& overrides) {
    IniConfig ini = IniConfig::parse_file(path);
    for (const std::string& o : overrides) ini.apply_override(o);
    return from_ini(std::move(ini));
}

TrainingConfig TrainingConfig::from_ini(IniConfig ini) {
    TrainingConfig cfg;
    cfg.epochs = ini.get_int("run", "epochs");
    cfg.batch_size = ini.get_int("run", "batch_size");
    cfg.seed = uint64_t(ini.get_int_or("run", "seed", 0));
    cfg.out_dir = ini.get("run", "out_dir");
    cfg.manifest_path = ini.get("data", "manifest");
    cfg.train_split = ini.get_or("data", "split", "train");
    cfg.use_captions = ini.get_bool_or("data", "captions", false);
    if (cfg.epochs < 1) throw ConfigError("run.epochs must be >= 1");
    if (cfg.batch_size < 1) throw ConfigError("run.batch_size must be >= 1");
    if (cfg.out_dir.empty()) throw ConfigError("run.out_dir must be set");
    cfg.ini = std::move(ini);
    return cfg;
}

}  // namespace genimg
