#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genimg/config.hpp"
#include "genimg/dataset.hpp"
#include "genimg/tensor.hpp"

namespace genimg {

// One procedural shape family. Sizes are half-extents as fractions of the
// image size; intensities are absolute values in [0, 1].
struct ShapeClassSpec {
    std::string name;  // 2D: disc | square | cross; 3D: ball | box | cross
    double min_size = 0.2;
    double max_size = 0.4;
    double min_intensity = 0.7;
    double max_intensity = 1.0;
    std::string caption = "a synthetic {name}";  // {name} is substituted
};

// Deterministic synthetic dataset: one bright shape per image on a dark
// field, optional pixel noise, optional paired binary masks. Every generated
// value lies in [0, 1]. Item i draws only from substream (seed, i), so the
// dataset is independent of generation order or worker count.
struct ShapeWorldSpec {
    int64_t image_size = 32;
    int spatial_rank = 2;
    double background = 0.1;
    double noise = 0.02;            // uniform amplitude added after rendering
    bool emit_masks = false;        // write the shape support as a paired image
    double holdout_fraction = 0.25; // trailing fraction of items tagged "test"
    uint64_t seed = 0;
    std::vector<ShapeClassSpec> classes;
};

// [shapeworld] section plus one [class.<name>] section per shape family.
ShapeWorldSpec shapeworld_from_ini(const IniConfig& ini);

// Render item `index` (class = index mod #classes). Optionally returns the
// caption and the pre-noise binary mask.
Tensor render_shapeworld_item(const ShapeWorldSpec& spec, int64_t index,
                              std::string* caption = nullptr, Tensor* mask = nullptr);

// Write n items + manifest.json under out_dir and return the manifest.
DatasetManifest generate_shapeworld(const ShapeWorldSpec& spec, int64_t n,
                                    const std::string& out_dir);

}  // namespace genimg
