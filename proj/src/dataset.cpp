#include "genimg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "json.hpp"

#include "genimg/config.hpp"
#include "genimg/errors.hpp"
#include "genimg/io.hpp"
#include "genimg/random.hpp"

namespace genimg {

namespace {

std::string resolve(const DatasetManifest& m, const std::string& path) {
    std::filesystem::path p(path);
    if (p.is_absolute() || m.root.empty()) return path;
    return (std::filesystem::path(m.root) / p).string();
}

// (sp...) -> (1, sp...)
Tensor prepend_channel(const Tensor& t) {
    std::vector<int64_t> shape = {1};
    shape.insert(shape.end(), t.shape().begin(), t.shape().end());
    Tensor out(shape);
    std::memcpy(out.data(), t.data(), sizeof(double) * size_t(t.numel()));
    return out;
}

Tensor load_one(const DatasetManifest& m, const std::string& path) {
    const std::string full = resolve(m, path);
    if (m.format == "png_2d") return prepend_channel(read_png16(full));
    if (m.format == "nifti_3d") return prepend_channel(read_nifti(full));
    if (m.format == "raw_array") return read_raw(full);
    throw ConfigError("unknown manifest format '" + m.format + "'");
}

}  // namespace

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
    nlohmann::json items = nlohmann::json::array();
    for (const ManifestItem& it : manifest.items) {
        nlohmann::json j = {{"image", it.image}, {"split", it.split}};
        if (!it.caption.empty()) j["caption"] = it.caption;
        if (!it.paired.empty()) j["paired"] = it.paired;
        items.push_back(std::move(j));
    }
    const nlohmann::json doc = {{"format", manifest.format}, {"items", items}};
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write manifest '" + path + "'");
    f << doc.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest '" + path + "'");
    nlohmann::json doc;
    try {
        f >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest '" + path + "': " + e.what());
    }

    DatasetManifest m;
    m.root = std::filesystem::path(path).parent_path().string();
    m.format = doc.at("format").get<std::string>();
    if (m.format != "png_2d" && m.format != "nifti_3d" && m.format != "raw_array") {
        throw ConfigError("unknown manifest format '" + m.format + "'");
    }

    std::map<std::string, std::string> split_of;
    for (const auto& j : doc.at("items")) {
        ManifestItem it;
        it.image = j.at("image").get<std::string>();
        it.split = j.value("split", "train");
        it.caption = j.value("caption", "");
        it.paired = j.value("paired", "");

        for (const std::string& p : {it.image, it.paired}) {
            if (p.empty()) continue;
            if (!std::filesystem::exists(resolve(m, p))) {
                throw IoError("manifest references missing file '" + p + "'");
            }
        }
        auto [at, inserted] = split_of.emplace(it.image, it.split);
        if (!inserted && at->second != it.split) {
            throw ConfigError("image '" + it.image + "' appears in splits '" + at->second +
                              "' and '" + it.split + "'");
        }
        m.items.push_back(std::move(it));
    }
    return m;
}

std::vector<int64_t> split_indices(const DatasetManifest& manifest, const std::string& split) {
    std::vector<int64_t> out;
    for (size_t i = 0; i < manifest.items.size(); ++i) {
        if (manifest.items[i].split == split) out.push_back(int64_t(i));
    }
    return out;
}

namespace {

ImageBatch stack_items(const DatasetManifest& m, const std::vector<int64_t>& idx,
                       int64_t limit, bool paired) {
    const int64_t take = limit < 0 ? int64_t(idx.size()) : std::min<int64_t>(limit, idx.size());
    if (take == 0) throw EmptyBatch("no items in the requested split");
    Tensor first = load_one(m, paired ? m.items[size_t(idx[0])].paired
                                      : m.items[size_t(idx[0])].image);
    std::vector<int64_t> shape = first.shape();
    shape.insert(shape.begin(), take);
    Tensor out(shape);
    const int64_t item = first.numel();
    std::memcpy(out.data(), first.data(), sizeof(double) * size_t(item));
    for (int64_t k = 1; k < take; ++k) {
        const ManifestItem& it = m.items[size_t(idx[size_t(k)])];
        const std::string& p = paired ? it.paired : it.image;
        if (p.empty()) throw ConfigError("item '" + it.image + "' has no paired image");
        Tensor t = load_one(m, p);
        if (!t.same_shape(first)) {
            throw ShapeMismatch("items of mixed shapes: " + t.shape_str() + " vs " +
                                first.shape_str());
        }
        std::memcpy(out.data() + k * item, t.data(), sizeof(double) * size_t(item));
    }
    return out;
}

}  // namespace

ImageBatch load_split_images(const DatasetManifest& manifest, const std::string& split,
                             int64_t limit) {
    return stack_items(manifest, split_indices(manifest, split), limit, false);
}

ImageBatch load_split_paired(const DatasetManifest& manifest, const std::string& split,
                             int64_t limit) {
    const std::vector<int64_t> idx = split_indices(manifest, split);
    if (!idx.empty() && manifest.items[size_t(idx[0])].paired.empty()) {
        throw ConfigError("split '" + split + "' has no paired images");
    }
    return stack_items(manifest, idx, limit, true);
}

std::vector<std::string> split_captions(const DatasetManifest& manifest, const std::string& split,
                                        int64_t limit) {
    std::vector<std::string> out;
    for (int64_t i : split_indices(manifest, split)) {
        if (limit >= 0 && int64_t(out.size()) >= limit) break;
        out.push_back(manifest.items[size_t(i)].caption);
    }
    return out;
}

Tensor embed_captions(const std::vector<std::string>& captions, int64_t rows, int64_t dim) {
    if (captions.empty()) throw EmptyInput("no captions to embed");
    if (rows < 1 || dim < 1) throw RangeError("embedder needs rows >= 1 and dim >= 1");
    Tensor out({int64_t(captions.size()), rows, dim});
    const double scale = 1.0 / std::sqrt(double(dim));
    for (size_t b = 0; b < captions.size(); ++b) {
        if (captions[b].empty()) continue;  // null conditioning: all-zero rows
        const uint64_t base = fnv1a64(captions[b]);
        for (int64_t r = 0; r < rows; ++r) {
            Rng rng(RandomSource{base, 0x9e3779b97f4a7c15ull + uint64_t(r)});
            for (int64_t d = 0; d < dim; ++d) {
                out[(int64_t(b) * rows + r) * dim + d] = rng.normal() * scale;
            }
        }
    }
    return out;
}

}  // namespace genimg
