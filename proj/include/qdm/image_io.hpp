#pragma once

#include <string>

#include "qdm/quadtree.hpp"
#include "qdm/tensor.hpp"

namespace qdm {

// Pixel mapping, fixed to the bit: 8-bit value v -> v * (2/255) - 1 in model
// space; model value x -> round((x+1) * 127.5) clamped to [0, 255] on write
// (round half away from zero via lround).

// PNG (8-bit gray or RGB) and PGM (P5); channels follow the file (1 or 3).
Tensor load_image(const std::string& path);
void save_image(const std::string& path, const Tensor& img);

// PBM (P4) bitmaps for masks; 1-bits mark active sites.
void save_pbm(const std::string& path, const MaskBits& bits);
MaskBits load_pbm(const std::string& path);

// PFM float maps (Pf grayscale / PF color, little-endian, bottom-up rows).
Tensor load_pfm(const std::string& path);
void save_pfm(const std::string& path, const Tensor& img);

// grayscale/RGB image with red quadtree leaf borders burned in, as (3, H, W) u8
TensorT<uint8_t> render_partition_overlay(const Tensor& img, const QuadtreePartition& part);
void save_overlay_png(const std::string& path, const TensorT<uint8_t>& rgb);

} // namespace qdm
