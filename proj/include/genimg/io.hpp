#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genimg/tensor.hpp"

namespace genimg {

// Single-image storage formats. All readers/writers throw IoError on file
// problems or malformed content.
//
//   - 2D images: 16-bit grayscale PNG (color type 0, bit depth 16). Values
//     clamp to [0, 1] and quantize to round(v * 65535).
//   - 3D volumes: NIfTI-1 float32 ("n+1" magic, data at offset 352). The
//     tensor's last axis maps to NIfTI dim[1] (the fastest-varying one), so
//     buffers round-trip in storage order.
//   - Arbitrary arrays: raw container with a 64-byte header
//         bytes 0..7   magic "GIMGRAW1"
//         u32 version (= 1), u32 dtype (1 = float64 little-endian),
//         u32 rank (1..5), u32 reserved (= 0),
//         u64 dims[5] (unused trail zero)
//     followed by the row-major float64 payload. Doubles are copied raw, so
//     a write/read round trip is bitwise.

void write_png16(const std::string& path, const Tensor& image);  // (H, W)
Tensor read_png16(const std::string& path);                      // -> (H, W)

void write_nifti(const std::string& path, const Tensor& volume);  // (D, H, W)
Tensor read_nifti(const std::string& path);                       // -> (D, H, W)

void write_raw(const std::string& path, const Tensor& t);  // rank 1..5
Tensor read_raw(const std::string& path);

// Whole-file helpers shared by the formats above and the checkpoint code.
std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes);

// mkdir -p; throws IoError on failure.
void ensure_directory(const std::string& path);

}  // namespace genimg
