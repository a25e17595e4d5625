#include "avstyle/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

namespace avstyle {

namespace {

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

uint32_t get_u32(const unsigned char* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

void write_chunk(std::vector<unsigned char>& out, const char type[4],
                 const unsigned char* data, size_t len) {
    put_u32(out, static_cast<uint32_t>(len));
    const size_t type_at = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data, data + len);
    uint32_t crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, out.data() + type_at, static_cast<uInt>(4 + len));
    put_u32(out, crc);
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

} // namespace

void write_png(const std::string& path, const Tensor& img) {
    if (img.ndim() != 3 || img.dim(0) != 3) throw DimensionError("write_png: expected [3,h,w]");
    const int h = img.dim(1), w = img.dim(2);
    const auto px = img.data();

    std::vector<unsigned char> raw(static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * 3));
    size_t at = 0;
    for (int y = 0; y < h; ++y) {
        raw[at++] = 0; // filter: none
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = std::clamp(px[(c * h + y) * w + x], 0.0f, 1.0f);
                raw[at++] = static_cast<unsigned char>(std::lround(v * 255.0f));
            }
    }

    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw IoError("write_png: deflate failed");
    comp.resize(comp_len);

    std::vector<unsigned char> out;
    static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    out.insert(out.end(), sig, sig + 8);
    unsigned char ihdr[13];
    ihdr[0] = static_cast<unsigned char>(w >> 24);
    ihdr[1] = static_cast<unsigned char>(w >> 16);
    ihdr[2] = static_cast<unsigned char>(w >> 8);
    ihdr[3] = static_cast<unsigned char>(w);
    ihdr[4] = static_cast<unsigned char>(h >> 24);
    ihdr[5] = static_cast<unsigned char>(h >> 16);
    ihdr[6] = static_cast<unsigned char>(h >> 8);
    ihdr[7] = static_cast<unsigned char>(h);
    ihdr[8] = 8;  // bit depth
    ihdr[9] = 2;  // truecolor
    ihdr[10] = ihdr[11] = ihdr[12] = 0;
    write_chunk(out, "IHDR", ihdr, 13);
    write_chunk(out, "IDAT", comp.data(), comp.size());
    write_chunk(out, "IEND", nullptr, 0);

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("write_png: cannot open " + path);
    os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!os) throw IoError("write_png: write failed " + path);
}

Tensor read_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_png: cannot open " + path);
    std::vector<unsigned char> file((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
    static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0)
        throw IoError("read_png: not a PNG file: " + path);

    int w = 0, h = 0, channels = 0;
    std::vector<unsigned char> idat;
    size_t at = 8;
    while (at + 8 <= file.size()) {
        const uint32_t len = get_u32(file.data() + at);
        if (at + 12 + len > file.size()) throw IoError("read_png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(file.data() + at + 4);
        const unsigned char* data = file.data() + at + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            w = static_cast<int>(get_u32(data));
            h = static_cast<int>(get_u32(data + 4));
            const int depth = data[8], color = data[9], interlace = data[12];
            if (depth != 8 || interlace != 0)
                throw IoError("read_png: only 8-bit non-interlaced PNGs supported");
            if (color == 0)
                channels = 1;
            else if (color == 2)
                channels = 3;
            else if (color == 6)
                channels = 4;
            else
                throw IoError("read_png: unsupported color type");
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        at += 12 + len;
    }
    if (w <= 0 || h <= 0 || channels == 0 || idat.empty())
        throw IoError("read_png: missing image data");

    const size_t stride = static_cast<size_t>(w) * channels;
    std::vector<unsigned char> raw(static_cast<size_t>(h) * (stride + 1));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw IoError("read_png: inflate failed");

    // Undo per-scanline filters in place (into a separate buffer of pixels).
    std::vector<unsigned char> pix(static_cast<size_t>(h) * stride);
    const int bpp = channels;
    for (int y = 0; y < h; ++y) {
        const unsigned char filter = raw[static_cast<size_t>(y) * (stride + 1)];
        const unsigned char* src = raw.data() + static_cast<size_t>(y) * (stride + 1) + 1;
        unsigned char* dst = pix.data() + static_cast<size_t>(y) * stride;
        const unsigned char* up = y > 0 ? dst - stride : nullptr;
        for (size_t x = 0; x < stride; ++x) {
            const int a = x >= static_cast<size_t>(bpp) ? dst[x - bpp] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= static_cast<size_t>(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw IoError("read_png: unknown filter type");
            }
            dst[x] = static_cast<unsigned char>(v & 0xff);
        }
    }

    Tensor out = Tensor::zeros({3, h, w});
    auto op = out.data_mut();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const unsigned char* p = pix.data() + (static_cast<size_t>(y) * w + x) * channels;
            for (int cc = 0; cc < 3; ++cc) {
                const unsigned char v = channels == 1 ? p[0] : p[cc];
                op[(cc * h + y) * w + x] = static_cast<float>(v) / 255.0f;
            }
        }
    return out;
}

} // namespace avstyle
