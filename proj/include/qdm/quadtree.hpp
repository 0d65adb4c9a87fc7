#pragma once

#include <cstdint>
#include <vector>

#include "qdm/tensor.hpp"

namespace qdm {

// Binary site map over a (B, Hm, Wm) grid; 1 marks detail-rich (active)
// sites, 0 homogeneous ones. threshold is in model value units ([-1,1] image
// range), compared against the channel-summed per-block max-min range.
struct QuadtreeMask {
    MaskBits bits;       // (B, Hm, Wm), entries in {0,1}
    double threshold = 0.0;
    int level = 0;       // pooling level l used during generation

    int64_t batch() const { return bits.dim(0); }
    int64_t height() const { return bits.dim(1); }
    int64_t width() const { return bits.dim(2); }
};

// l = max(ceil(max(log2(H/Hm), log2(W/Wm))), 1)
int pool_level(int64_t H, int64_t W, int64_t Hm, int64_t Wm);

// Pooling route: per-channel block max + block max of the negated image give
// the range; ranges are summed over channels and compared strictly (> s).
// H, W must be powers of two; Hm <= H, Wm <= W. The mask is nearest-resized
// to (Hm, Wm), which may be coarser or finer than the pooled grid.
template <typename T>
QuadtreeMask generate_mask(const TensorT<T>& images, double s, int64_t Hm, int64_t Wm);

// Oracle route: explicit per-block scans, batch size 1, identical contract.
template <typename T>
QuadtreeMask brute_force_mask(const TensorT<T>& image, double s, int64_t Hm, int64_t Wm);

// fraction of 1-entries
double mask_density(const QuadtreeMask& mask);
double mask_density(const MaskBits& bits);

// mask resampled to a (B, H, W) pixel grid (nearest)
MaskBits mask_to_grid(const MaskBits& bits, int64_t H, int64_t W);

// Full recursive 4-way decomposition of a square power-of-two image.
// A node is a leaf when its channel-summed range is <= s or its side is 1.
struct PartitionNode {
    int64_t x = 0, y = 0, side = 0;
    bool is_leaf = false;
    double aggregate = 0.0; // mean intensity over the block (channel mean)
    int children[4] = {-1, -1, -1, -1}; // NW, NE, SW, SE
};

struct QuadtreePartition {
    int64_t image_side = 0;
    double threshold = 0.0;
    std::vector<PartitionNode> nodes; // nodes[0] is the root

    std::vector<int> leaves() const;
};

template <typename T>
QuadtreePartition build_partition(const TensorT<T>& image, double s);

// Edge-replicating pad to the enclosing power-of-two square (used at the CLI
// boundary for arbitrary imported images).
template <typename T>
TensorT<T> pad_to_pow2_square(const TensorT<T>& image);

} // namespace qdm
