#include "genimg/shapeworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "genimg/errors.hpp"
#include "genimg/io.hpp"
#include "genimg/random.hpp"

namespace genimg {

namespace {

std::string substitute_name(std::string text, const std::string& name) {
    const std::string tag = "{name}";
    size_t at;
    while ((at = text.find(tag)) != std::string::npos) text.replace(at, tag.size(), name);
    return text;
}

// Shape support predicate at integer coordinates, centered at c with
// half-extent h (both in pixels).
bool inside_2d(const std::string& kind, double x, double y, double cx, double cy, double h) {
    const double dx = x - cx, dy = y - cy;
    if (kind == "disc") return dx * dx + dy * dy <= h * h;
    if (kind == "square") return std::abs(dx) <= h && std::abs(dy) <= h;
    if (kind == "cross") {
        const double arm = std::max(1.0, 0.34 * h);
        return (std::abs(dx) <= arm && std::abs(dy) <= h) ||
               (std::abs(dx) <= h && std::abs(dy) <= arm);
    }
    throw ConfigError("unknown 2d shape class '" + kind + "'");
}

bool inside_3d(const std::string& kind, double x, double y, double z, double cx, double cy,
               double cz, double h) {
    const double dx = x - cx, dy = y - cy, dz = z - cz;
    if (kind == "ball") return dx * dx + dy * dy + dz * dz <= h * h;
    if (kind == "box") return std::abs(dx) <= h && std::abs(dy) <= h && std::abs(dz) <= h;
    if (kind == "cross") {
        const double arm = std::max(1.0, 0.34 * h);
        const bool in_x = std::abs(dx) <= h && std::abs(dy) <= arm && std::abs(dz) <= arm;
        const bool in_y = std::abs(dx) <= arm && std::abs(dy) <= h && std::abs(dz) <= arm;
        const bool in_z = std::abs(dx) <= arm && std::abs(dy) <= arm && std::abs(dz) <= h;
        return in_x || in_y || in_z;
    }
    throw ConfigError("unknown 3d shape class '" + kind + "'");
}

void validate_spec(const ShapeWorldSpec& spec) {
    if (spec.image_size < 8) throw ConfigError("shapeworld image_size must be >= 8");
    if (spec.spatial_rank != 2 && spec.spatial_rank != 3) {
        throw ConfigError("shapeworld spatial_rank must be 2 or 3");
    }
    if (spec.classes.empty()) throw ConfigError("shapeworld needs at least one class");
    if (!(spec.background >= 0.0 && spec.background <= 1.0) || spec.noise < 0.0) {
        throw ConfigError("shapeworld background must lie in [0,1] and noise be >= 0");
    }
    if (!(spec.holdout_fraction >= 0.0 && spec.holdout_fraction < 1.0)) {
        throw ConfigError("shapeworld holdout_fraction must lie in [0, 1)");
    }
    for (const ShapeClassSpec& c : spec.classes) {
        if (!(c.min_size > 0.0 && c.min_size <= c.max_size && c.max_size < 0.5)) {
            throw ConfigError("class '" + c.name + "' sizes must satisfy 0 < min <= max < 0.5");
        }
        if (!(c.min_intensity >= 0.0 && c.min_intensity <= c.max_intensity &&
              c.max_intensity <= 1.0)) {
            throw ConfigError("class '" + c.name + "' intensities must be ordered within [0,1]");
        }
    }
}

}  // namespace

ShapeWorldSpec shapeworld_from_ini(const IniConfig& ini) {
    ShapeWorldSpec spec;
    const std::string s = "shapeworld";
    spec.image_size = ini.get_int_or(s, "image_size", 32);
    spec.spatial_rank = int(ini.get_int_or(s, "spatial_rank", 2));
    spec.background = ini.get_double_or(s, "background", 0.1);
    spec.noise = ini.get_double_or(s, "noise", 0.02);
    spec.emit_masks = ini.get_bool_or(s, "emit_masks", false);
    spec.holdout_fraction = ini.get_double_or(s, "holdout_fraction", 0.25);
    spec.seed = uint64_t(ini.get_int_or(s, "seed", 0));

    for (const std::string& section : ini.sections()) {
        if (section.rfind("class.", 0) != 0) continue;
        ShapeClassSpec c;
        c.name = section.substr(6);
        c.min_size = ini.get_double_or(section, "min_size", c.min_size);
        c.max_size = ini.get_double_or(section, "max_size", c.max_size);
        c.min_intensity = ini.get_double_or(section, "min_intensity", c.min_intensity);
        c.max_intensity = ini.get_double_or(section, "max_intensity", c.max_intensity);
        c.caption = ini.get_or(section, "caption", c.caption);
        spec.classes.push_back(std::move(c));
    }
    validate_spec(spec);
    return spec;
}

Tensor render_shapeworld_item(const ShapeWorldSpec& spec, int64_t index, std::string* caption,
                              Tensor* mask) {
    validate_spec(spec);
    if (index < 0) throw RangeError("item index must be >= 0");
    const ShapeClassSpec& cls = spec.classes[size_t(index) % spec.classes.size()];
    Rng rng(RandomSource{spec.seed, uint64_t(index)});

    const int64_t S = spec.image_size;
    const double h = (cls.min_size + (cls.max_size - cls.min_size) * rng.uniform()) * double(S);
    // Keep the whole shape inside the frame.
    const double lo = h, hi = double(S - 1) - h;
    std::vector<double> center(static_cast<size_t>(spec.spatial_rank));
    for (double& c : center) c = lo + (hi - lo) * rng.uniform();
    const double intensity =
        cls.min_intensity + (cls.max_intensity - cls.min_intensity) * rng.uniform();

    std::vector<int64_t> shape(static_cast<size_t>(spec.spatial_rank), S);
    Tensor img(shape, spec.background);
    Tensor support(shape);
    if (spec.spatial_rank == 2) {
        for (int64_t y = 0; y < S; ++y) {
            for (int64_t x = 0; x < S; ++x) {
                if (inside_2d(cls.name, double(x), double(y), center[1], center[0], h)) {
                    img[y * S + x] = intensity;
                    support[y * S + x] = 1.0;
                }
            }
        }
    } else {
        for (int64_t z = 0; z < S; ++z) {
            for (int64_t y = 0; y < S; ++y) {
                for (int64_t x = 0; x < S; ++x) {
                    if (inside_3d(cls.name, double(x), double(y), double(z), center[2], center[1],
                                  center[0], h)) {
                        img[(z * S + y) * S + x] = intensity;
                        support[(z * S + y) * S + x] = 1.0;
                    }
                }
            }
        }
    }

    if (spec.noise > 0.0) {
        for (int64_t i = 0; i < img.numel(); ++i) {
            img[i] = std::clamp(img[i] + spec.noise * (2.0 * rng.uniform() - 1.0), 0.0, 1.0);
        }
    }

    if (caption) *caption = substitute_name(cls.caption, cls.name);
    if (mask) *mask = std::move(support);
    return img;
}

DatasetManifest generate_shapeworld(const ShapeWorldSpec& spec, int64_t n,
                                    const std::string& out_dir) {
    validate_spec(spec);
    if (n < 1) throw RangeError("shapeworld needs n >= 1");

    ensure_directory(out_dir);
    ensure_directory(out_dir + "/images");
    if (spec.emit_masks) ensure_directory(out_dir + "/masks");

    DatasetManifest m;
    m.format = spec.spatial_rank == 2 ? "png_2d" : "nifti_3d";
    m.root = out_dir;
    const char* ext = spec.spatial_rank == 2 ? "png" : "nii";
    // At least holdout_fraction of the items land in "test" (floor on the
    // train count; the epsilon absorbs representation dust like 10 * 0.7).
    const int64_t n_train =
        int64_t(std::floor(double(n) * (1.0 - spec.holdout_fraction) + 1e-9));

    for (int64_t i = 0; i < n; ++i) {
        std::string caption;
        Tensor mask;
        Tensor img = render_shapeworld_item(spec, i, &caption, spec.emit_masks ? &mask : nullptr);

        char name[64];
        std::snprintf(name, sizeof(name), "images/item_%05lld.%s", (long long)i, ext);
        ManifestItem item;
        item.image = name;
        item.caption = caption;
        item.split = i < n_train ? "train" : "test";

        const std::string img_path = out_dir + "/" + item.image;
        if (spec.spatial_rank == 2) {
            write_png16(img_path, img);
        } else {
            write_nifti(img_path, img);
        }
        if (spec.emit_masks) {
            std::snprintf(name, sizeof(name), "masks/item_%05lld.%s", (long long)i, ext);
            item.paired = name;
            const std::string mask_path = out_dir + "/" + item.paired;
            if (spec.spatial_rank == 2) {
                write_png16(mask_path, mask);
            } else {
                write_nifti(mask_path, mask);
            }
        }
        m.items.push_back(std::move(item));
    }

    save_manifest(out_dir + "/manifest.json", m);
    return m;
}

}  // namespace genimg
