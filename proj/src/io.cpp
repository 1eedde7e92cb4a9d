#include "genimg/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "genimg/errors.hpp"

namespace genimg {

namespace {

void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

uint32_t get_u32be(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

template <typename T>
void put_le(std::vector<uint8_t>& out, T v) {
    uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get_le(const uint8_t* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

void append_chunk(std::vector<uint8_t>& out, const char type[4],
                  const std::vector<uint8_t>& data) {
    put_u32be(out, uint32_t(data.size()));
    const size_t type_at = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uLong crc =
        crc32(0L, out.data() + type_at, uInt(4 + data.size()));
    put_u32be(out, uint32_t(crc));
}

std::vector<uint8_t> zlib_deflate(const std::vector<uint8_t>& in) {
    uLongf bound = compressBound(uLong(in.size()));
    std::vector<uint8_t> out(bound);
    if (compress2(out.data(), &bound, in.data(), uLong(in.size()), Z_BEST_SPEED) != Z_OK) {
        throw IoError("zlib compression failed");
    }
    out.resize(bound);
    return out;
}

std::vector<uint8_t> zlib_inflate(const std::vector<uint8_t>& in, size_t expected) {
    std::vector<uint8_t> out(expected);
    uLongf got = uLongf(expected);
    const int rc = uncompress(out.data(), &got, in.data(), uLong(in.size()));
    if (rc != Z_OK || got != expected) throw IoError("zlib decompression failed");
    return out;
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

constexpr uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

}  // namespace

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    f.seekg(0, std::ios::end);
    const std::streamoff n = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<uint8_t> bytes(static_cast<size_t>(n));
    if (n > 0) f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) throw IoError("short read on '" + path + "'");
    return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw IoError("short write on '" + path + "'");
}

void ensure_directory(const std::string& path) {
    std::error_code ec;
    std::filesystem::create_directories(path, ec);
    if (ec) throw IoError("cannot create directory '" + path + "': " + ec.message());
}

// ---- PNG (16-bit grayscale) -------------------------------------------------

void write_png16(const std::string& path, const Tensor& image) {
    if (image.rank() != 2) throw IoError("png images are (H, W); got " + image.shape_str());
    const int64_t H = image.dim(0), W = image.dim(1);

    std::vector<uint8_t> scan;
    scan.reserve(size_t(H * (1 + W * 2)));
    for (int64_t r = 0; r < H; ++r) {
        scan.push_back(0);  // filter: none
        for (int64_t c = 0; c < W; ++c) {
            const double v = std::clamp(image[r * W + c], 0.0, 1.0);
            const uint16_t q = uint16_t(std::lround(v * 65535.0));
            scan.push_back(uint8_t(q >> 8));
            scan.push_back(uint8_t(q & 0xff));
        }
    }

    std::vector<uint8_t> out(kPngSig, kPngSig + 8);
    std::vector<uint8_t> ihdr;
    put_u32be(ihdr, uint32_t(W));
    put_u32be(ihdr, uint32_t(H));
    ihdr.push_back(16);  // bit depth
    ihdr.push_back(0);   // grayscale
    ihdr.push_back(0);   // deflate
    ihdr.push_back(0);   // adaptive filtering
    ihdr.push_back(0);   // no interlace
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", zlib_deflate(scan));
    append_chunk(out, "IEND", {});
    write_file_bytes(path, out);
}

Tensor read_png16(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0) {
        throw IoError("'" + path + "' is not a png");
    }

    int64_t W = 0, H = 0;
    std::vector<uint8_t> idat;
    size_t at = 8;
    bool saw_end = false;
    while (at + 12 <= bytes.size()) {
        const uint32_t len = get_u32be(&bytes[at]);
        if (at + 12 + len > bytes.size()) throw IoError("truncated chunk in '" + path + "'");
        const char* type = reinterpret_cast<const char*>(&bytes[at + 4]);
        const uint8_t* data = &bytes[at + 8];
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw IoError("bad IHDR in '" + path + "'");
            W = get_u32be(data);
            H = get_u32be(data + 4);
            if (data[8] != 16 || data[9] != 0) {
                throw IoError("'" + path + "' is not 16-bit grayscale");
            }
            if (data[12] != 0) throw IoError("interlaced png unsupported: '" + path + "'");
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_end = true;
            break;
        }
        at += 12 + len;
    }
    if (W <= 0 || H <= 0 || !saw_end) throw IoError("malformed png '" + path + "'");

    const size_t stride = size_t(1 + W * 2);
    std::vector<uint8_t> scan = zlib_inflate(idat, stride * size_t(H));

    // Undo per-row filters (bytes-per-pixel is 2).
    const int bpp = 2;
    for (int64_t r = 0; r < H; ++r) {
        uint8_t* row = &scan[size_t(r) * stride];
        const uint8_t* prev = r > 0 ? &scan[size_t(r - 1) * stride] : nullptr;
        const uint8_t filter = row[0];
        uint8_t* px = row + 1;
        const uint8_t* up = prev ? prev + 1 : nullptr;
        const int64_t n = W * 2;
        for (int64_t i = 0; i < n; ++i) {
            const int left = i >= bpp ? px[i - bpp] : 0;
            const int above = up ? up[i] : 0;
            const int upleft = (up && i >= bpp) ? up[i - bpp] : 0;
            int v = px[i];
            switch (filter) {
                case 0: break;
                case 1: v += left; break;
                case 2: v += above; break;
                case 3: v += (left + above) / 2; break;
                case 4: v += paeth(left, above, upleft); break;
                default: throw IoError("unknown png filter in '" + path + "'");
            }
            px[i] = uint8_t(v & 0xff);
        }
    }

    Tensor img({H, W});
    for (int64_t r = 0; r < H; ++r) {
        const uint8_t* px = &scan[size_t(r) * stride] + 1;
        for (int64_t c = 0; c < W; ++c) {
            const uint16_t q = uint16_t((px[c * 2] << 8) | px[c * 2 + 1]);
            img[r * W + c] = double(q) / 65535.0;
        }
    }
    return img;
}

// ---- NIfTI-1 (float32) --------------------------------------------------------

void write_nifti(const std::string& path, const Tensor& volume) {
    if (volume.rank() != 3) throw IoError("nifti volumes are (D, H, W); got " + volume.shape_str());
    std::vector<uint8_t> out(352, 0);

    auto put_i32 = [&](size_t off, int32_t v) { std::memcpy(&out[off], &v, 4); };
    auto put_i16 = [&](size_t off, int16_t v) { std::memcpy(&out[off], &v, 2); };
    auto put_f32 = [&](size_t off, float v) { std::memcpy(&out[off], &v, 4); };

    put_i32(0, 348);  // sizeof_hdr
    // dim[8] at offset 40: rank then sizes, fastest-varying first.
    put_i16(40, 3);
    put_i16(42, int16_t(volume.dim(2)));  // W
    put_i16(44, int16_t(volume.dim(1)));  // H
    put_i16(46, int16_t(volume.dim(0)));  // D
    for (size_t k = 4; k <= 7; ++k) put_i16(40 + 2 * k, 1);
    put_i16(70, 16);  // datatype: float32
    put_i16(72, 32);  // bitpix
    for (size_t k = 0; k <= 7; ++k) put_f32(76 + 4 * k, 1.0f);  // pixdim
    put_f32(108, 352.0f);  // vox_offset
    put_f32(112, 1.0f);    // scl_slope
    out[344] = 'n';
    out[345] = '+';
    out[346] = '1';
    out[347] = '\0';
    // bytes 348..351: extension flag, all zero

    out.reserve(out.size() + size_t(volume.numel()) * 4);
    for (int64_t i = 0; i < volume.numel(); ++i) put_le(out, float(volume[i]));
    write_file_bytes(path, out);
}

Tensor read_nifti(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() < 352) throw IoError("'" + path + "' too small for a nifti header");
    if (get_le<int32_t>(&bytes[0]) != 348 || std::memcmp(&bytes[344], "n+1", 3) != 0) {
        throw IoError("'" + path + "' is not a single-file nifti");
    }
    if (get_le<int16_t>(&bytes[70]) != 16) throw IoError("'" + path + "' is not float32 nifti");
    if (get_le<int16_t>(&bytes[40]) != 3) throw IoError("'" + path + "' is not rank 3");
    const int64_t W = get_le<int16_t>(&bytes[42]);
    const int64_t H = get_le<int16_t>(&bytes[44]);
    const int64_t D = get_le<int16_t>(&bytes[46]);
    const size_t vox_offset = size_t(get_le<float>(&bytes[108]));
    const int64_t n = D * H * W;
    if (bytes.size() < vox_offset + size_t(n) * 4) throw IoError("truncated nifti '" + path + "'");

    Tensor vol({D, H, W});
    for (int64_t i = 0; i < n; ++i) {
        vol[i] = double(get_le<float>(&bytes[vox_offset + size_t(i) * 4]));
    }
    return vol;
}

// ---- raw container --------------------------------------------------------------

void write_raw(const std::string& path, const Tensor& t) {
    if (t.rank() < 1 || t.rank() > 5) throw IoError("raw container holds rank 1..5 tensors");
    std::vector<uint8_t> out;
    out.reserve(64 + size_t(t.numel()) * 8);
    const char magic[8] = {'G', 'I', 'M', 'G', 'R', 'A', 'W', '1'};
    out.insert(out.end(), magic, magic + 8);
    put_le<uint32_t>(out, 1);                   // version
    put_le<uint32_t>(out, 1);                   // dtype: float64le
    put_le<uint32_t>(out, uint32_t(t.rank()));  // rank
    put_le<uint32_t>(out, 0);                   // reserved
    for (int r = 0; r < 5; ++r) put_le<uint64_t>(out, r < t.rank() ? uint64_t(t.dim(r)) : 0);
    for (int64_t i = 0; i < t.numel(); ++i) put_le<double>(out, t[i]);
    write_file_bytes(path, out);
}

Tensor read_raw(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() < 64 || std::memcmp(bytes.data(), "GIMGRAW1", 8) != 0) {
        throw IoError("'" + path + "' is not a raw tensor container");
    }
    if (get_le<uint32_t>(&bytes[8]) != 1) throw IoError("unsupported raw version in '" + path + "'");
    if (get_le<uint32_t>(&bytes[12]) != 1) throw IoError("unsupported raw dtype in '" + path + "'");
    const uint32_t rank = get_le<uint32_t>(&bytes[16]);
    if (rank < 1 || rank > 5) throw IoError("bad raw rank in '" + path + "'");
    std::vector<int64_t> shape(rank);
    int64_t n = 1;
    for (uint32_t r = 0; r < rank; ++r) {
        shape[r] = int64_t(get_le<uint64_t>(&bytes[24 + 8 * r]));
        if (shape[r] < 1) throw IoError("bad raw dims in '" + path + "'");
        n *= shape[r];
    }
    if (bytes.size() != 64 + size_t(n) * 8) throw IoError("raw payload size mismatch in '" + path + "'");
    Tensor t(shape);
    std::memcpy(t.data(), bytes.data() + 64, size_t(n) * 8);
    return t;
}

}  // namespace genimg
