#include "qdm/quadtree.hpp"

#include <cmath>

namespace qdm {

int pool_level(int64_t H, int64_t W, int64_t Hm, int64_t Wm) {
    const double l = std::max(std::log2(static_cast<double>(H) / static_cast<double>(Hm)),
                              std::log2(static_cast<double>(W) / static_cast<double>(Wm)));
    return static_cast<int>(std::max<int64_t>(static_cast<int64_t>(std::ceil(l - 1e-12)), 1));
}

namespace {

template <typename T>
void check_mask_inputs(const TensorT<T>& images, double s, int64_t Hm, int64_t Wm) {
    check_image4(images, "generate_mask");
    const int64_t H = images.dim(2), W = images.dim(3);
    if (!is_pow2(H) || !is_pow2(W))
        throw DimensionError("generate_mask: H,W must be powers of two, got " + shape_str({H, W}));
    if (Hm < 1 || Wm < 1 || Hm > H || Wm > W)
        throw DimensionError("generate_mask: mask size must satisfy 1 <= Hm <= H, 1 <= Wm <= W");
    if (s < 0.0) throw ConfigError("generate_mask: threshold must be >= 0");
}

// nearest-resize a single (Hp, Wp) binary plane into bits(b, :, :)
void resize_plane_into(const std::vector<uint8_t>& plane, int64_t Hp, int64_t Wp,
                       MaskBits& bits, int64_t b) {
    const int64_t Hm = bits.dim(1), Wm = bits.dim(2);
    for (int64_t i = 0; i < Hm; ++i) {
        const int64_t si = nearest_src_index(i, Hp, Hm);
        for (int64_t j = 0; j < Wm; ++j) {
            const int64_t sj = nearest_src_index(j, Wp, Wm);
            bits[(b * Hm + i) * Wm + j] = plane[static_cast<size_t>(si * Wp + sj)];
        }
    }
}

} // namespace

template <typename T>
QuadtreeMask generate_mask(const TensorT<T>& images, double s, int64_t Hm, int64_t Wm) {
    check_mask_inputs(images, s, Hm, Wm);
    const int64_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    const int l = pool_level(H, W, Hm, Wm);
    const int64_t k = int64_t(1) << l;

    TensorT<T> neg(images.shape());
    for (int64_t i = 0; i < images.numel(); ++i) neg[i] = -images[i];
    const TensorT<T> vplus = max_pool(images, k);  // per-channel block max
    const TensorT<T> vminus = max_pool(neg, k);    // per-channel block max of -I = -min

    const int64_t Hp = H / k, Wp = W / k;
    QuadtreeMask mask;
    mask.bits = MaskBits({B, Hm, Wm});
    mask.threshold = s;
    mask.level = l;
    std::vector<uint8_t> plane(static_cast<size_t>(Hp * Wp));
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t i = 0; i < Hp; ++i)
            for (int64_t j = 0; j < Wp; ++j) {
                double r = 0.0; // channel-summed range, double accumulation
                for (int64_t c = 0; c < C; ++c)
                    r += static_cast<double>(vplus.at(b, c, i, j)) + static_cast<double>(vminus.at(b, c, i, j));
                plane[static_cast<size_t>(i * Wp + j)] = r > s ? 1 : 0;
            }
        resize_plane_into(plane, Hp, Wp, mask.bits, b);
    }
    return mask;
}

template <typename T>
QuadtreeMask brute_force_mask(const TensorT<T>& image, double s, int64_t Hm, int64_t Wm) {
    check_mask_inputs(image, s, Hm, Wm);
    if (image.dim(0) != 1) throw DimensionError("brute_force_mask: batch size must be 1");
    const int64_t C = image.dim(1), H = image.dim(2), W = image.dim(3);
    const int l = pool_level(H, W, Hm, Wm);
    const int64_t k = int64_t(1) << l;
    if (H % k != 0 || W % k != 0)
        throw DimensionError("brute_force_mask: block size exceeds image");

    const int64_t Hp = H / k, Wp = W / k;
    std::vector<uint8_t> plane(static_cast<size_t>(Hp * Wp));
    for (int64_t i = 0; i < Hp; ++i)
        for (int64_t j = 0; j < Wp; ++j) {
            double r = 0.0;
            for (int64_t c = 0; c < C; ++c) {
                T mx = image.at(0, c, i * k, j * k);
                T mn = mx;
                for (int64_t di = 0; di < k; ++di)
                    for (int64_t dj = 0; dj < k; ++dj) {
                        const T v = image.at(0, c, i * k + di, j * k + dj);
                        mx = std::max(mx, v);
                        mn = std::min(mn, v);
                    }
                r += static_cast<double>(mx) + static_cast<double>(-mn);
            }
            plane[static_cast<size_t>(i * Wp + j)] = r > s ? 1 : 0;
        }

    QuadtreeMask mask;
    mask.bits = MaskBits({1, Hm, Wm});
    mask.threshold = s;
    mask.level = l;
    resize_plane_into(plane, Hp, Wp, mask.bits, 0);
    return mask;
}

double mask_density(const MaskBits& bits) {
    int64_t ones = 0;
    for (int64_t i = 0; i < bits.numel(); ++i) ones += bits[i] ? 1 : 0;
    return static_cast<double>(ones) / static_cast<double>(bits.numel());
}

double mask_density(const QuadtreeMask& mask) { return mask_density(mask.bits); }

MaskBits mask_to_grid(const MaskBits& bits, int64_t H, int64_t W) {
    const int64_t B = bits.dim(0);
    const auto img = bits.reshaped({B, 1, bits.dim(1), bits.dim(2)});
    auto resized = resize_nearest(img, H, W);
    return resized.reshaped({B, H, W});
}

std::vector<int> QuadtreePartition::leaves() const {
    std::vector<int> out;
    for (size_t i = 0; i < nodes.size(); ++i)
        if (nodes[i].is_leaf) out.push_back(static_cast<int>(i));
    return out;
}

namespace {

template <typename T>
double block_range(const TensorT<T>& img, int64_t x, int64_t y, int64_t side) {
    const int64_t C = img.dim(1);
    double r = 0.0;
    for (int64_t c = 0; c < C; ++c) {
        T mx = img.at(0, c, y, x), mn = mx;
        for (int64_t i = y; i < y + side; ++i)
            for (int64_t j = x; j < x + side; ++j) {
                const T v = img.at(0, c, i, j);
                mx = std::max(mx, v);
                mn = std::min(mn, v);
            }
        r += static_cast<double>(mx) - static_cast<double>(mn);
    }
    return r;
}

template <typename T>
double block_mean(const TensorT<T>& img, int64_t x, int64_t y, int64_t side) {
    const int64_t C = img.dim(1);
    double s = 0.0;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = y; i < y + side; ++i)
            for (int64_t j = x; j < x + side; ++j) s += static_cast<double>(img.at(0, c, i, j));
    return s / static_cast<double>(C * side * side);
}

template <typename T>
int split_node(const TensorT<T>& img, double s, QuadtreePartition& part,
               int64_t x, int64_t y, int64_t side) {
    PartitionNode node;
    node.x = x;
    node.y = y;
    node.side = side;
    node.aggregate = block_mean(img, x, y, side);
    node.is_leaf = side == 1 || block_range(img, x, y, side) <= s;
    const int id = static_cast<int>(part.nodes.size());
    part.nodes.push_back(node);
    if (!part.nodes[static_cast<size_t>(id)].is_leaf) {
        const int64_t h = side / 2;
        const int nw = split_node(img, s, part, x, y, h);
        const int ne = split_node(img, s, part, x + h, y, h);
        const int sw = split_node(img, s, part, x, y + h, h);
        const int se = split_node(img, s, part, x + h, y + h, h);
        part.nodes[static_cast<size_t>(id)].children[0] = nw;
        part.nodes[static_cast<size_t>(id)].children[1] = ne;
        part.nodes[static_cast<size_t>(id)].children[2] = sw;
        part.nodes[static_cast<size_t>(id)].children[3] = se;
    }
    return id;
}

} // namespace

template <typename T>
QuadtreePartition build_partition(const TensorT<T>& image, double s) {
    check_image4(image, "build_partition");
    if (image.dim(0) != 1) throw DimensionError("build_partition: batch size must be 1");
    const int64_t H = image.dim(2), W = image.dim(3);
    if (H != W) throw DimensionError("build_partition: image must be square");
    if (!is_pow2(H)) throw DimensionError("build_partition: side must be a power of two");
    if (s < 0.0) throw ConfigError("build_partition: threshold must be >= 0");

    QuadtreePartition part;
    part.image_side = H;
    part.threshold = s;
    split_node(image, s, part, 0, 0, H);
    return part;
}

template <typename T>
TensorT<T> pad_to_pow2_square(const TensorT<T>& image) {
    check_image4(image, "pad_to_pow2_square");
    const int64_t B = image.dim(0), C = image.dim(1), H = image.dim(2), W = image.dim(3);
    const int64_t side = int64_t(1) << ceil_log2(std::max(H, W));
    if (side == H && side == W) return image;
    TensorT<T> out({B, C, side, side});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < side; ++i)
                for (int64_t j = 0; j < side; ++j)
                    out.at(b, c, i, j) = image.at(b, c, std::min(i, H - 1), std::min(j, W - 1));
    return out;
}

template QuadtreeMask generate_mask<float>(const TensorT<float>&, double, int64_t, int64_t);
template QuadtreeMask generate_mask<double>(const TensorT<double>&, double, int64_t, int64_t);
template QuadtreeMask brute_force_mask<float>(const TensorT<float>&, double, int64_t, int64_t);
template QuadtreeMask brute_force_mask<double>(const TensorT<double>&, double, int64_t, int64_t);
template QuadtreePartition build_partition<float>(const TensorT<float>&, double);
template QuadtreePartition build_partition<double>(const TensorT<double>&, double);
template TensorT<float> pad_to_pow2_square<float>(const TensorT<float>&);
template TensorT<double> pad_to_pow2_square<double>(const TensorT<double>&);

} // namespace qdm
