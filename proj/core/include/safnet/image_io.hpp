#pragma once

#include <filesystem>

#include "safnet/tensor.hpp"

// Raster file formats. Images are 1 x C x H x W double tensors.
namespace safnet::io {

// 8- or 16-bit PNG/TIFF normalised to [0, 1]. Gray is expanded to RGB and
// alpha dropped, so the result always has three channels.
TensorD read_ldr(const std::filesystem::path& path);

// Quantises [0, 1] values (clamped) to 8 or 16 bits; C must be 1 or 3.
void write_png(const std::filesystem::path& path, const TensorD& image, int bit_depth = 8);
void write_tiff(const std::filesystem::path& path, const TensorD& image, int bit_depth = 16);

// Portable float map: float32, little-endian (scale -1), bottom-up rows.
// C must be 1 ("Pf") or 3 ("PF"). Two-channel data (flow) is stored in a
// PF file with a zero third channel.
void write_pfm(const std::filesystem::path& path, const TensorD& image);
TensorD read_pfm(const std::filesystem::path& path);

// Radiance RGBE (.hdr). Written uncompressed; reading also accepts
// run-length encoded scanlines.
void write_rgbe(const std::filesystem::path& path, const TensorD& image);
TensorD read_rgbe(const std::filesystem::path& path);

// Dispatches on extension: .pfm or .hdr.
TensorD read_hdr_image(const std::filesystem::path& path);

}  // namespace safnet::io
