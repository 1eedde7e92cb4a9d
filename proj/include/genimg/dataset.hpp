#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genimg/foundation.hpp"
#include "genimg/tensor.hpp"

namespace genimg {

// One dataset entry. `image` (and `paired`, when present) are stored relative
// to the manifest file unless absolute; `caption` may be empty; `split` tags
// disjoint subsets (train/val/test by convention).
struct ManifestItem {
    std::string image;
    std::string caption;
    std::string paired;
    std::string split = "train";
};

struct DatasetManifest {
    std::string format = "png_2d";  // png_2d | nifti_3d | raw_array
    std::vector<ManifestItem> items;
    std::string root;  // directory the relative paths resolve against
};

void save_manifest(const std::string& path, const DatasetManifest& manifest);

// Loads and validates: known format, every referenced path exists, and no
// image path appears under two different splits.
DatasetManifest load_manifest(const std::string& path);

std::vector<int64_t> split_indices(const DatasetManifest& manifest, const std::string& split);

// Image loading per manifest format; single items come back as (1, spatial...)
// and batches as (N, 1, spatial...). `limit` < 0 means all.
ImageBatch load_split_images(const DatasetManifest& manifest, const std::string& split,
                             int64_t limit = -1);
ImageBatch load_split_paired(const DatasetManifest& manifest, const std::string& split,
                             int64_t limit = -1);
std::vector<std::string> split_captions(const DatasetManifest& manifest, const std::string& split,
                                        int64_t limit = -1);

// Frozen hash-based caption embedder standing in for a pretrained text
// encoder: caption -> (rows, dim) context block, deterministic in the caption
// text alone. The empty caption maps to all zeros (the null-conditioning
// convention). Batch output is (B, rows, dim).
Tensor embed_captions(const std::vector<std::string>& captions, int64_t rows = 4,
                      int64_t dim = 16);

}  // namespace genimg
