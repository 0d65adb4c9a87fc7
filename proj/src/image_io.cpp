#include "qdm/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include <png.h>

namespace qdm {

namespace {

float u8_to_model(uint8_t v) { return static_cast<float>(v) * (2.0f / 255.0f) - 1.0f; }

uint8_t model_to_u8(float x) {
    const long v = std::lround((static_cast<double>(x) + 1.0) * 127.5);
    return static_cast<uint8_t>(std::clamp<long>(v, 0, 255));
}

bool has_suffix(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

struct PngReadCloser {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* fp = nullptr;
    ~PngReadCloser() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

struct PngWriteCloser {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* fp = nullptr;
    ~PngWriteCloser() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

Tensor load_png(const std::string& path) {
    PngReadCloser ctx;
    ctx.fp = std::fopen(path.c_str(), "rb");
    if (!ctx.fp) throw DataError("cannot open '" + path + "'");
    unsigned char header[8];
    if (std::fread(header, 1, 8, ctx.fp) != 8 || png_sig_cmp(header, 0, 8))
        throw DataError("'" + path + "' is not a PNG file");
    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.png || !ctx.info) throw DataError("png reader allocation failed");
    if (setjmp(png_jmpbuf(ctx.png))) throw DataError("png decode failed for '" + path + "'");
    png_init_io(ctx.png, ctx.fp);
    png_set_sig_bytes(ctx.png, 8);
    png_read_info(ctx.png, ctx.info);

    png_set_strip_16(ctx.png);
    png_set_packing(ctx.png);
    png_set_strip_alpha(ctx.png);
    if (png_get_color_type(ctx.png, ctx.info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(ctx.png);
    if (png_get_color_type(ctx.png, ctx.info) == PNG_COLOR_TYPE_GRAY &&
        png_get_bit_depth(ctx.png, ctx.info) < 8)
        png_set_expand_gray_1_2_4_to_8(ctx.png);
    png_read_update_info(ctx.png, ctx.info);

    const int64_t W = png_get_image_width(ctx.png, ctx.info);
    const int64_t H = png_get_image_height(ctx.png, ctx.info);
    const int64_t C = png_get_channels(ctx.png, ctx.info);
    if (C != 1 && C != 3) throw DataError("png '" + path + "': unsupported channel count");

    std::vector<uint8_t> row(static_cast<size_t>(W * C));
    Tensor img({1, C, H, W});
    for (int64_t y = 0; y < H; ++y) {
        png_read_row(ctx.png, row.data(), nullptr);
        for (int64_t x = 0; x < W; ++x)
            for (int64_t c = 0; c < C; ++c)
                img.at(0, c, y, x) = u8_to_model(row[static_cast<size_t>(x * C + c)]);
    }
    png_read_end(ctx.png, nullptr);
    return img;
}

void save_png_u8(const std::string& path, const uint8_t* data, int64_t C, int64_t H, int64_t W) {
    PngWriteCloser ctx;
    ctx.fp = std::fopen(path.c_str(), "wb");
    if (!ctx.fp) throw DataError("cannot open '" + path + "' for writing");
    ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.png || !ctx.info) throw DataError("png writer allocation failed");
    if (setjmp(png_jmpbuf(ctx.png))) throw DataError("png encode failed for '" + path + "'");
    png_init_io(ctx.png, ctx.fp);
    png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
                 C == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(ctx.png, ctx.info);
    std::vector<uint8_t> row(static_cast<size_t>(W * C));
    for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x)
            for (int64_t c = 0; c < C; ++c)
                row[static_cast<size_t>(x * C + c)] = data[(c * H + y) * W + x];
        png_write_row(ctx.png, row.data());
    }
    png_write_end(ctx.png, nullptr);
}

// PNM header token reader skipping whitespace and '#' comments
int64_t pnm_int(std::ifstream& is) {
    int ch = is.get();
    while (ch == '#' || std::isspace(ch)) {
        if (ch == '#')
            while (ch != '\n' && ch != EOF) ch = is.get();
        ch = is.get();
    }
    int64_t v = 0;
    bool any = false;
    while (std::isdigit(ch)) {
        v = v * 10 + (ch - '0');
        any = true;
        ch = is.get();
    }
    if (!any) throw DataError("malformed PNM header");
    return v;
}

Tensor load_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path + "'");
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || m1 != '5') throw DataError("'" + path + "' is not a binary PGM (P5)");
    const int64_t W = pnm_int(is), H = pnm_int(is), maxval = pnm_int(is);
    if (maxval != 255) throw DataError("pgm '" + path + "': only maxval 255 supported");
    std::vector<uint8_t> buf(static_cast<size_t>(W * H));
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) throw DataError("pgm '" + path + "': truncated pixel data");
    Tensor img({1, 1, H, W});
    for (int64_t i = 0; i < H * W; ++i) img[i] = u8_to_model(buf[static_cast<size_t>(i)]);
    return img;
}

void save_pgm(const std::string& path, const Tensor& img) {
    const int64_t H = img.dim(2), W = img.dim(3);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    os << "P5\n" << W << " " << H << "\n255\n";
    std::vector<uint8_t> buf(static_cast<size_t>(W * H));
    for (int64_t i = 0; i < H * W; ++i) buf[static_cast<size_t>(i)] = model_to_u8(img[i]);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

} // namespace

Tensor load_image(const std::string& path) {
    if (has_suffix(path, ".png")) return load_png(path);
    if (has_suffix(path, ".pgm")) return load_pgm(path);
    if (has_suffix(path, ".pfm")) return load_pfm(path);
    throw DataError("unsupported image format: '" + path + "' (want .png, .pgm or .pfm)");
}

void save_image(const std::string& path, const Tensor& img) {
    check_image4(img, "save_image");
    if (img.dim(0) != 1) throw DataError("save_image: batch size must be 1");
    const int64_t C = img.dim(1);
    if (C != 1 && C != 3) throw DataError("save_image: want 1 or 3 channels");
    if (has_suffix(path, ".pgm")) {
        if (C != 1) throw DataError("save_image: PGM is grayscale only");
        save_pgm(path, img);
        return;
    }
    if (has_suffix(path, ".pfm")) {
        save_pfm(path, img);
        return;
    }
    if (!has_suffix(path, ".png")) throw DataError("save_image: unsupported output format for '" + path + "'");
    const int64_t H = img.dim(2), W = img.dim(3);
    std::vector<uint8_t> buf(static_cast<size_t>(C * H * W));
    for (int64_t i = 0; i < C * H * W; ++i) buf[static_cast<size_t>(i)] = model_to_u8(img[i]);
    save_png_u8(path, buf.data(), C, H, W);
}

void save_pbm(const std::string& path, const MaskBits& bits) {
    if (bits.rank() != 3 || bits.dim(0) != 1) throw DataError("save_pbm: want a (1, H, W) mask");
    const int64_t H = bits.dim(1), W = bits.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    os << "P4\n" << W << " " << H << "\n";
    const int64_t row_bytes = (W + 7) / 8;
    std::vector<uint8_t> row(static_cast<size_t>(row_bytes));
    for (int64_t y = 0; y < H; ++y) {
        std::fill(row.begin(), row.end(), 0);
        for (int64_t x = 0; x < W; ++x)
            if (bits[(0 * H + y) * W + x]) row[static_cast<size_t>(x / 8)] |= static_cast<uint8_t>(0x80u >> (x % 8));
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

MaskBits load_pbm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path + "'");
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || m1 != '4') throw DataError("'" + path + "' is not a binary PBM (P4)");
    const int64_t W = pnm_int(is), H = pnm_int(is);
    const int64_t row_bytes = (W + 7) / 8;
    std::vector<uint8_t> row(static_cast<size_t>(row_bytes));
    MaskBits bits({1, H, W});
    for (int64_t y = 0; y < H; ++y) {
        is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!is) throw DataError("pbm '" + path + "': truncated data");
        for (int64_t x = 0; x < W; ++x)
            bits[(0 * H + y) * W + x] = (row[static_cast<size_t>(x / 8)] >> (7 - x % 8)) & 1u;
    }
    return bits;
}

Tensor load_pfm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path + "'");
    std::string magic;
    is >> magic;
    if (magic != "Pf" && magic != "PF") throw DataError("'" + path + "' is not a PFM file");
    const int64_t C = magic == "Pf" ? 1 : 3;
    int64_t W = 0, H = 0;
    double scale = 0.0;
    is >> W >> H >> scale;
    is.get(); // single whitespace before the raster
    if (W < 1 || H < 1 || scale == 0.0) throw DataError("pfm '" + path + "': malformed header");
    if (scale > 0) throw DataError("pfm '" + path + "': big-endian files are not supported");
    std::vector<float> row(static_cast<size_t>(W * C));
    Tensor img({1, C, H, W});
    for (int64_t y = H - 1; y >= 0; --y) { // bottom-up storage
        is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
        if (!is) throw DataError("pfm '" + path + "': truncated data");
        for (int64_t x = 0; x < W; ++x)
            for (int64_t c = 0; c < C; ++c) img.at(0, c, y, x) = row[static_cast<size_t>(x * C + c)];
    }
    return img;
}

void save_pfm(const std::string& path, const Tensor& img) {
    check_image4(img, "save_pfm");
    if (img.dim(0) != 1) throw DataError("save_pfm: batch size must be 1");
    const int64_t C = img.dim(1), H = img.dim(2), W = img.dim(3);
    if (C != 1 && C != 3) throw DataError("save_pfm: want 1 or 3 channels");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    os << (C == 1 ? "Pf" : "PF") << "\n" << W << " " << H << "\n-1.0\n";
    std::vector<float> row(static_cast<size_t>(W * C));
    for (int64_t y = H - 1; y >= 0; --y) {
        for (int64_t x = 0; x < W; ++x)
            for (int64_t c = 0; c < C; ++c) row[static_cast<size_t>(x * C + c)] = img.at(0, c, y, x);
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
}

TensorT<uint8_t> render_partition_overlay(const Tensor& img, const QuadtreePartition& part) {
    check_image4(img, "render_partition_overlay");
    const int64_t C = img.dim(1), H = img.dim(2), W = img.dim(3);
    TensorT<uint8_t> rgb({3, H, W});
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            for (int64_t c = 0; c < 3; ++c)
                rgb[(c * H + y) * W + x] = model_to_u8(img.at(0, C == 3 ? c : 0, y, x));
    for (int id : part.leaves()) {
        const PartitionNode& n = part.nodes[static_cast<size_t>(id)];
        auto mark = [&](int64_t y, int64_t x) {
            if (y < 0 || y >= H || x < 0 || x >= W) return;
            rgb[(0 * H + y) * W + x] = 255;
            rgb[(1 * H + y) * W + x] = 0;
            rgb[(2 * H + y) * W + x] = 0;
        };
        for (int64_t i = 0; i < n.side; ++i) {
            mark(n.y, n.x + i);
            mark(n.y + n.side - 1, n.x + i);
            mark(n.y + i, n.x);
            mark(n.y + i, n.x + n.side - 1);
        }
    }
    return rgb;
}

void save_overlay_png(const std::string& path, const TensorT<uint8_t>& rgb) {
    if (rgb.rank() != 3 || rgb.dim(0) != 3) throw DataError("save_overlay_png: want (3, H, W)");
    save_png_u8(path, rgb.data(), 3, rgb.dim(1), rgb.dim(2));
}

} // namespace qdm
