#include "avstyle/avatar.hpp"

#include <algorithm>
#include <cmath>

namespace avstyle {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kCameraZ = 2.0; // orthographic image plane offset in world units
} // namespace

void AvatarConfig::validate() const {
    if (grid < 4 || grid % 2 != 0) throw UsageError("AvatarConfig: grid must be even and >= 4");
    if (vox != 2) throw UsageError("AvatarConfig: voxel side must be 2 for the 3-scale decoder");
    if (map_h != 2 * grid || map_w != 2 * grid)
        throw UsageError("AvatarConfig: identity maps must be 2*grid on each side");
    if (bias_blocks != 3) throw UsageError("AvatarConfig: decoder expects 3 bias-mapper scales");
    if (img_h < 8 || img_w < 8) throw UsageError("AvatarConfig: render size too small");
    if (expr_dim < 4 || code_dim < 1 || channels < 4) throw UsageError("AvatarConfig: bad widths");
}

void ViewSpec::validate() const {
    if (!(yaw >= -kPi / 2 && yaw <= kPi / 2)) throw UsageError("ViewSpec: yaw out of range");
    if (!(pitch >= -kPi / 6 && pitch <= kPi / 6)) throw UsageError("ViewSpec: pitch out of range");
}

AvatarNet::AvatarNet(AvatarConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const int g = cfg_.grid;
    center_grid_ = Tensor::zeros({g, g, 3});
    auto cg = center_grid_.data_mut();
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            cg[(gy * g + gx) * 3 + 0] = static_cast<float>((gx + 0.5) / g * 2.0 - 1.0);
            cg[(gy * g + gx) * 3 + 1] = static_cast<float>(1.0 - (gy + 0.5) / g * 2.0);
            cg[(gy * g + gx) * 3 + 2] = 0.0f;
        }
}

ParamStore AvatarNet::init_params(Rng& rng) const {
    ParamStore ps;
    const int c = cfg_.channels;
    auto conv_he = [&](int co, int ci) {
        return Tensor::randn({co, ci, 3, 3}, rng, std::sqrt(2.0f / (static_cast<float>(ci) * 9.0f)), true);
    };
    auto conv_small = [&](int co, int ci, float s) { return Tensor::randn({co, ci, 3, 3}, rng, s, true); };
    auto zeros_b = [&](int n) { return Tensor::zeros({n}, true); };

    // Identity encoder trunk (frozen).
    ps.add("identity.trunk.conv1.w", conv_he(c, 6), Partition::Frozen);
    ps.add("identity.trunk.conv1.b", zeros_b(c), Partition::Frozen);
    ps.add("identity.trunk.conv2.w", conv_he(c, c), Partition::Frozen);
    ps.add("identity.trunk.conv2.b", zeros_b(c), Partition::Frozen);
    ps.add("identity.trunk.conv3.w", conv_he(c, c), Partition::Frozen);
    ps.add("identity.trunk.conv3.b", zeros_b(c), Partition::Frozen);

    // Bias mappers (the stylizable partition). Final conv of each block starts
    // at zero so untrained bias maps are exactly zero.
    for (const char* sc : {"s4", "s8", "s16"}) {
        const std::string base = std::string("identity.mapper_") + sc;
        ps.add(base + ".c0.w", conv_he(c, c), Partition::Stylizable);
        ps.add(base + ".c0.b", zeros_b(c), Partition::Stylizable);
        ps.add(base + ".c1.w", Tensor::zeros({c, c, 3, 3}, true), Partition::Stylizable);
        ps.add(base + ".c1.b", zeros_b(c), Partition::Stylizable);
    }

    // Expression encoder (frozen).
    ps.add("expr.fc1.w",
           Tensor::randn({cfg_.code_dim, cfg_.expr_dim}, rng,
                         std::sqrt(1.0f / static_cast<float>(cfg_.expr_dim)), true),
           Partition::Frozen);
    ps.add("expr.fc1.b", zeros_b(cfg_.code_dim), Partition::Frozen);
    ps.add("expr.fc2.w",
           Tensor::randn({cfg_.code_dim, cfg_.code_dim}, rng,
                         std::sqrt(1.0f / static_cast<float>(cfg_.code_dim)), true),
           Partition::Frozen);
    ps.add("expr.fc2.b", zeros_b(cfg_.code_dim), Partition::Frozen);

    // Decoder (frozen).
    const int base_c = 8;
    ps.add("decoder.base", Tensor::randn({base_c, cfg_.grid / 2, cfg_.grid / 2}, rng, 0.5f, true),
           Partition::Frozen);
    ps.add("decoder.conv4.w", conv_he(c, base_c + cfg_.code_dim), Partition::Frozen);
    ps.add("decoder.conv4.b", zeros_b(c), Partition::Frozen);
    ps.add("decoder.conv8.w", conv_he(c, c), Partition::Frozen);
    ps.add("decoder.conv8.b", zeros_b(c), Partition::Frozen);
    ps.add("decoder.conv16.w", conv_he(c, c), Partition::Frozen);
    ps.add("decoder.conv16.b", zeros_b(c), Partition::Frozen);
    ps.add("decoder.head_centers.w", conv_small(3, c, 0.05f), Partition::Frozen);
    ps.add("decoder.head_centers.b", zeros_b(3), Partition::Frozen);
    ps.add("decoder.head_scales.w", conv_small(1, c, 0.05f), Partition::Frozen);
    ps.add("decoder.head_scales.b", zeros_b(1), Partition::Frozen);
    ps.add("decoder.head_payload.w", conv_small(4 * cfg_.vox, c, 0.1f), Partition::Frozen);
    ps.add("decoder.head_payload.b", zeros_b(4 * cfg_.vox), Partition::Frozen);
    return ps;
}

void AvatarNet::check_identity_input(const IdentityInput& id_in) const {
    const std::vector<int> want{3, cfg_.map_h, cfg_.map_w};
    if (!id_in.position_map.defined() || !id_in.texture_map.defined() ||
        id_in.position_map.shape() != want || id_in.texture_map.shape() != want)
        throw DimensionError("identity input maps must be [3, map_h, map_w]");
}

std::vector<Tensor> AvatarNet::identity_encode(Tape& tape, const ParamStore& params,
                                               const IdentityInput& id_in) const {
    check_identity_input(id_in);
    Tensor x = concat_channels(tape, id_in.position_map, id_in.texture_map);
    Tensor f16 = relu(tape, conv2d(tape, x, params.at("identity.trunk.conv1.w"),
                                   params.at("identity.trunk.conv1.b"), 1));
    Tensor f8 = relu(tape, conv2d(tape, f16, params.at("identity.trunk.conv2.w"),
                                  params.at("identity.trunk.conv2.b"), 2));
    Tensor f4 = relu(tape, conv2d(tape, f8, params.at("identity.trunk.conv3.w"),
                                  params.at("identity.trunk.conv3.b"), 2));
    auto mapper = [&](const char* name, const Tensor& feat) {
        const std::string base = std::string("identity.mapper_") + name;
        Tensor h = relu(tape, conv2d(tape, feat, params.at(base + ".c0.w"),
                                     params.at(base + ".c0.b"), 1));
        return conv2d(tape, h, params.at(base + ".c1.w"), params.at(base + ".c1.b"), 1);
    };
    return {mapper("s4", f4), mapper("s8", f8), mapper("s16", f16)};
}

Tensor AvatarNet::expression_encode(Tape& tape, const ParamStore& params, const Tensor& e) const {
    if (e.ndim() != 1 || e.dim(0) != cfg_.expr_dim)
        throw DimensionError("expression vector must be [expr_dim]");
    Tensor h = tanh_act(tape, linear(tape, params.at("expr.fc1.w"), e, params.at("expr.fc1.b")));
    return linear(tape, params.at("expr.fc2.w"), h, params.at("expr.fc2.b"));
}

PrimitiveSlab AvatarNet::decode(Tape& tape, const ParamStore& params,
                                const std::vector<Tensor>& bias_maps, const Tensor& z_e) const {
    if (bias_maps.size() != 3) throw DimensionError("decode: expected 3 bias maps");
    const int g = cfg_.grid, v = cfg_.vox, coarse = g / 2;
    if (z_e.ndim() != 1 || z_e.dim(0) != cfg_.code_dim)
        throw DimensionError("decode: bad expression code length");
    if (bias_maps[0].dim(1) != coarse || bias_maps[1].dim(1) != g || bias_maps[2].dim(1) != g * v)
        throw DimensionError("decode: bias map scales do not match decoder");

    Tensor zmap = broadcast_spatial(tape, z_e, coarse, coarse);
    Tensor x = concat_channels(tape, params.at("decoder.base"), zmap);
    Tensor h4 = relu(tape, add(tape,
                               conv2d(tape, x, params.at("decoder.conv4.w"),
                                      params.at("decoder.conv4.b"), 1),
                               bias_maps[0]));
    Tensor h8 = relu(tape, add(tape,
                               conv2d(tape, upsample2x(tape, h4), params.at("decoder.conv8.w"),
                                      params.at("decoder.conv8.b"), 1),
                               bias_maps[1]));
    Tensor h16 = relu(tape, add(tape,
                                conv2d(tape, upsample2x(tape, h8), params.at("decoder.conv16.w"),
                                       params.at("decoder.conv16.b"), 1),
                                bias_maps[2]));

    // Geometry heads at the primitive grid scale.
    Tensor centers_raw = conv2d(tape, h8, params.at("decoder.head_centers.w"),
                                params.at("decoder.head_centers.b"), 1);
    Tensor scales_raw = conv2d(tape, h8, params.at("decoder.head_scales.w"),
                               params.at("decoder.head_scales.b"), 1);
    Tensor payload_raw = conv2d(tape, h16, params.at("decoder.head_payload.w"),
                                params.at("decoder.head_payload.b"), 1);

    std::vector<int> cmap(static_cast<size_t>(g) * g * 3);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx)
            for (int a = 0; a < 3; ++a)
                cmap[(static_cast<size_t>(gy) * g + gx) * 3 + a] = (a * g + gy) * g + gx;
    Tensor centers = add(tape,
                         reorder(tape, scale(tape, tanh_act(tape, centers_raw), 0.3f),
                                 {g, g, 3}, std::move(cmap)),
                         center_grid_);

    // softplus keeps scales strictly positive; small floor keeps boxes from
    // collapsing to degenerate slivers early in training.
    const float sp_bias = std::log(std::exp(0.18f) - 1.0f);
    Tensor scales = add_scalar(
        tape, softplus(tape, add_scalar(tape, reshape(tape, scales_raw, {g, g}), sp_bias)), 0.02f);

    std::vector<int> pmap(static_cast<size_t>(g) * g * 4 * v * v * v);
    {
        const int fm_side = g * v;
        size_t at = 0;
        for (int gy = 0; gy < g; ++gy)
            for (int gx = 0; gx < g; ++gx)
                for (int ch = 0; ch < 4; ++ch)
                    for (int vz = 0; vz < v; ++vz)
                        for (int vy = 0; vy < v; ++vy)
                            for (int vx = 0; vx < v; ++vx)
                                pmap[at++] = ((ch * v + vz) * fm_side + (gy * v + vy)) * fm_side +
                                             (gx * v + vx);
    }
    Tensor payload = reorder(tape, sigmoid(tape, payload_raw), {g, g, 4, v, v, v}, std::move(pmap));

    return PrimitiveSlab{centers, scales, payload};
}

namespace {

struct HitGeom {
    int pixel;
    int prim;
    double t0, t1;
    int8_t axis0, axis1; // -1 when no differentiable face chain (clamped)
    int8_t sign0, sign1;
};

struct HitShade {
    float alpha;
    float rgb[3];
    float u[3];
};

struct RenderPlan {
    int g = 0, v = 0, h = 0, w = 0;
    double rot[3][3];  // world -> camera
    double axis_x[3];  // world direction of camera x (R row 0)
    double axis_y[3];
    double axis_z[3];
    double dir[3];     // ray direction in world space (-axis_z)
    std::vector<HitGeom> hits;        // sorted by (pixel, t0, prim)
    std::vector<HitShade> shade;      // parallel to hits (valid for composited ones)
    std::vector<int> pixel_begin;     // size h*w+1, run offsets into hits
    std::vector<int> composited;      // per pixel: number of hits composited
};

inline void world_point(const RenderPlan& p, double px, double py, double o[3]) {
    for (int a = 0; a < 3; ++a)
        o[a] = px * p.axis_x[a] + py * p.axis_y[a] + kCameraZ * p.axis_z[a];
}

// Trilinear sample of one primitive's payload at fractional voxel coords.
// Voxel y is flipped relative to world y so that payload rows follow image
// convention (row 0 on top).
struct TriSample {
    int c0[3];      // base cell per axis (x,y,z)
    float b[3];     // fractional offset per axis
};

inline TriSample make_trisample(const float u[3], int v) {
    TriSample ts;
    const float f[3] = {u[0] * (v - 1), (1.0f - u[1]) * (v - 1), u[2] * (v - 1)};
    for (int a = 0; a < 3; ++a) {
        int cell = static_cast<int>(f[a]);
        cell = std::clamp(cell, 0, std::max(v - 2, 0));
        ts.c0[a] = cell;
        ts.b[a] = std::clamp(f[a] - cell, 0.0f, 1.0f);
    }
    return ts;
}

} // namespace

Tensor AvatarNet::render(Tape& tape, const PrimitiveSlab& slab, const ViewSpec& view) const {
    view.validate();
    const int g = cfg_.grid, v = cfg_.vox, h = cfg_.img_h, w = cfg_.img_w;
    if (slab.centers.shape() != std::vector<int>{g, g, 3} ||
        slab.scales.shape() != std::vector<int>{g, g} ||
        slab.payload.shape() != std::vector<int>{g, g, 4, v, v, v})
        throw DimensionError("render: slab shapes do not match config");

    auto plan = std::make_shared<RenderPlan>();
    plan->g = g;
    plan->v = v;
    plan->h = h;
    plan->w = w;
    const double cy = std::cos(view.yaw), sy = std::sin(view.yaw);
    const double cp = std::cos(view.pitch), sp = std::sin(view.pitch);
    const double rot[3][3] = {{cy, 0, sy}, {sp * sy, cp, -sp * cy}, {-cp * sy, sp, cp * cy}};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) plan->rot[i][j] = rot[i][j];
    for (int a = 0; a < 3; ++a) {
        plan->axis_x[a] = rot[0][a];
        plan->axis_y[a] = rot[1][a];
        plan->axis_z[a] = rot[2][a];
        plan->dir[a] = -rot[2][a];
    }

    const float* cen = slab.centers.data().data();
    const float* sca = slab.scales.data().data();
    const float* pay = slab.payload.data().data();

    std::vector<double> px_of(static_cast<size_t>(w)), py_of(static_cast<size_t>(h));
    for (int x = 0; x < w; ++x) px_of[static_cast<size_t>(x)] = (x + 0.5) / w * 2.0 - 1.0;
    for (int y = 0; y < h; ++y) py_of[static_cast<size_t>(y)] = 1.0 - (y + 0.5) / h * 2.0;
    double inv_dir[3];
    bool dir_ok[3];
    for (int a = 0; a < 3; ++a) {
        dir_ok[a] = std::abs(plan->dir[a]) >= 1e-12;
        inv_dir[a] = dir_ok[a] ? 1.0 / plan->dir[a] : 0.0;
    }

    // Candidate pass: project each primitive's bounding box onto the image and
    // slab-test the covered pixel rays. Candidates arrive primitive-major.
    std::vector<HitGeom> cands;
    cands.reserve(static_cast<size_t>(g) * g * 64);
    for (int prim = 0; prim < g * g; ++prim) {
        const double c[3] = {cen[prim * 3], cen[prim * 3 + 1], cen[prim * 3 + 2]};
        const double s = sca[prim];
        double bx0 = 1e30, bx1 = -1e30, by0 = 1e30, by1 = -1e30;
        for (int corner = 0; corner < 8; ++corner) {
            const double p[3] = {c[0] + ((corner & 1) ? s : -s), c[1] + ((corner & 2) ? s : -s),
                                 c[2] + ((corner & 4) ? s : -s)};
            const double xc = rot[0][0] * p[0] + rot[0][1] * p[1] + rot[0][2] * p[2];
            const double yc = rot[1][0] * p[0] + rot[1][1] * p[1] + rot[1][2] * p[2];
            bx0 = std::min(bx0, xc);
            bx1 = std::max(bx1, xc);
            by0 = std::min(by0, yc);
            by1 = std::max(by1, yc);
        }
        const int x_lo = std::max(0, static_cast<int>(std::ceil((bx0 + 1.0) * 0.5 * w - 0.5)));
        const int x_hi = std::min(w - 1, static_cast<int>(std::floor((bx1 + 1.0) * 0.5 * w - 0.5)));
        const int y_lo = std::max(0, static_cast<int>(std::ceil((1.0 - by1) * 0.5 * h - 0.5)));
        const int y_hi = std::min(h - 1, static_cast<int>(std::floor((1.0 - by0) * 0.5 * h - 0.5)));
        for (int py_i = y_lo; py_i <= y_hi; ++py_i) {
            const double py = py_of[static_cast<size_t>(py_i)];
            for (int px_i = x_lo; px_i <= x_hi; ++px_i) {
                const double px = px_of[static_cast<size_t>(px_i)];
                double o[3];
                world_point(*plan, px, py, o);
                double t0 = -1e30, t1 = 1e30;
                int axis0 = -1, axis1 = -1, sign0 = 0, sign1 = 0;
                bool miss = false;
                for (int a = 0; a < 3; ++a) {
                    if (!dir_ok[a]) {
                        if (o[a] < c[a] - s || o[a] > c[a] + s) {
                            miss = true;
                            break;
                        }
                        continue;
                    }
                    const double inv = inv_dir[a];
                    double ta = (c[a] - s - o[a]) * inv;
                    double tb = (c[a] + s - o[a]) * inv;
                    int near_sign = -1, far_sign = 1;
                    if (ta > tb) {
                        std::swap(ta, tb);
                        near_sign = 1;
                        far_sign = -1;
                    }
                    if (ta > t0) {
                        t0 = ta;
                        axis0 = a;
                        sign0 = near_sign;
                    }
                    if (tb < t1) {
                        t1 = tb;
                        axis1 = a;
                        sign1 = far_sign;
                    }
                }
                if (miss || t1 <= t0 || t1 <= 0.0) continue;
                if (t0 < 0.0) {
                    t0 = 0.0;
                    axis0 = -1;
                }
                cands.push_back(HitGeom{py_i * w + px_i, prim, t0, t1, static_cast<int8_t>(axis0),
                                        static_cast<int8_t>(axis1), static_cast<int8_t>(sign0),
                                        static_cast<int8_t>(sign1)});
            }
        }
    }

    // Bucket candidates by pixel (counting sort), then order each short
    // per-pixel run by (t0, prim) with insertion sort.
    plan->pixel_begin.assign(static_cast<size_t>(h) * w + 1, 0);
    plan->composited.assign(static_cast<size_t>(h) * w, 0);
    for (const auto& hit : cands) plan->pixel_begin[static_cast<size_t>(hit.pixel) + 1]++;
    for (size_t i = 1; i < plan->pixel_begin.size(); ++i)
        plan->pixel_begin[i] += plan->pixel_begin[i - 1];
    std::vector<HitGeom>& hits = plan->hits;
    hits.resize(cands.size());
    {
        std::vector<int> cursor(plan->pixel_begin.begin(), plan->pixel_begin.end() - 1);
        for (const auto& hit : cands)
            hits[static_cast<size_t>(cursor[static_cast<size_t>(hit.pixel)]++)] = hit;
    }
    for (int pix = 0; pix < h * w; ++pix) {
        const int begin = plan->pixel_begin[static_cast<size_t>(pix)];
        const int end = plan->pixel_begin[static_cast<size_t>(pix) + 1];
        for (int i = begin + 1; i < end; ++i) {
            HitGeom key = hits[static_cast<size_t>(i)];
            int j = i - 1;
            while (j >= begin && (hits[static_cast<size_t>(j)].t0 > key.t0 ||
                                  (hits[static_cast<size_t>(j)].t0 == key.t0 &&
                                   hits[static_cast<size_t>(j)].prim > key.prim))) {
                hits[static_cast<size_t>(j + 1)] = hits[static_cast<size_t>(j)];
                --j;
            }
            hits[static_cast<size_t>(j + 1)] = key;
        }
    }
    plan->shade.resize(hits.size());

    Tensor out = Tensor::full({3, h, w}, kBackgroundGray);
    float* img = out.data_mut().data();
    const int vv = v * v, vvv = v * v * v;

    for (int pix = 0; pix < h * w; ++pix) {
        const int begin = plan->pixel_begin[static_cast<size_t>(pix)];
        const int end = plan->pixel_begin[static_cast<size_t>(pix) + 1];
        if (begin == end) continue;
        const double px = (pix % w + 0.5) / w * 2.0 - 1.0;
        const double py = 1.0 - (pix / w + 0.5) / h * 2.0;
        double o[3];
        world_point(*plan, px, py, o);
        double color[3] = {0, 0, 0};
        double transmit = 1.0;
        int n_comp = 0;
        for (int i = begin; i < end; ++i) {
            const HitGeom& hit = hits[static_cast<size_t>(i)];
            const double c[3] = {cen[hit.prim * 3], cen[hit.prim * 3 + 1], cen[hit.prim * 3 + 2]};
            const double s = sca[hit.prim];
            const double tm = 0.5 * (hit.t0 + hit.t1);
            HitShade& hs = plan->shade[static_cast<size_t>(i)];
            for (int a = 0; a < 3; ++a) {
                const double m = o[a] + tm * plan->dir[a];
                hs.u[a] = static_cast<float>(std::clamp((m - c[a] + s) / (2.0 * s), 0.0, 1.0));
            }
            const TriSample ts = make_trisample(hs.u, v);
            const float* pp = pay + static_cast<size_t>(hit.prim) * 4 * vvv;
            float sampled[4];
            for (int ch = 0; ch < 4; ++ch) {
                const float* q = pp + ch * vvv;
                double acc = 0.0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const float wz = dz ? ts.b[2] : 1.0f - ts.b[2];
                            const float wy = dy ? ts.b[1] : 1.0f - ts.b[1];
                            const float wx = dx ? ts.b[0] : 1.0f - ts.b[0];
                            acc += static_cast<double>(wz) * wy * wx *
                                   q[(ts.c0[2] + dz) * vv + (ts.c0[1] + dy) * v + (ts.c0[0] + dx)];
                        }
                sampled[ch] = static_cast<float>(acc);
            }
            hs.alpha = sampled[3];
            hs.rgb[0] = sampled[0];
            hs.rgb[1] = sampled[1];
            hs.rgb[2] = sampled[2];
            for (int ch = 0; ch < 3; ++ch) color[ch] += transmit * hs.alpha * hs.rgb[ch];
            transmit *= 1.0 - hs.alpha;
            ++n_comp;
            if (transmit < 1e-4) break;
        }
        plan->composited[static_cast<size_t>(pix)] = n_comp;
        for (int ch = 0; ch < 3; ++ch)
            img[ch * h * w + pix] = static_cast<float>(color[ch] + transmit * kBackgroundGray);
    }

    const bool need_grad =
        slab.centers.requires_grad() || slab.scales.requires_grad() || slab.payload.requires_grad();
    if (need_grad) {
        out.set_requires_grad(true);
        auto ci = slab.centers.impl(), si = slab.scales.impl(), pi = slab.payload.impl();
        auto oi = out.impl();
        tape.record("render", {ci, si, pi, oi}, [plan, ci, si, pi, oi] {
            if (oi->grad.empty()) return;
            const int h = plan->h, w = plan->w, v = plan->v;
            const int vv = v * v, vvv = v * v * v;
            const float* gimg = oi->grad.data();
            const bool want_c = ci->requires_grad;
            const bool want_s = si->requires_grad;
            const bool want_p = pi->requires_grad;
            if (want_c) ci->ensure_grad();
            if (want_s) si->ensure_grad();
            if (want_p) pi->ensure_grad();
            std::vector<double> trans, behind;
            for (int pix = 0; pix < h * w; ++pix) {
                const int begin = plan->pixel_begin[static_cast<size_t>(pix)];
                const int n = plan->composited[static_cast<size_t>(pix)];
                if (n == 0) continue;
                const double gpix[3] = {gimg[0 * h * w + pix], gimg[1 * h * w + pix],
                                        gimg[2 * h * w + pix]};
                if (gpix[0] == 0 && gpix[1] == 0 && gpix[2] == 0) continue;

                trans.assign(static_cast<size_t>(n), 1.0);
                for (int i = 1; i < n; ++i)
                    trans[static_cast<size_t>(i)] =
                        trans[static_cast<size_t>(i - 1)] *
                        (1.0 - plan->shade[static_cast<size_t>(begin + i - 1)].alpha);
                behind.assign(static_cast<size_t>(n) * 3, 0.0);
                double beh[3] = {kBackgroundGray, kBackgroundGray, kBackgroundGray};
                for (int i = n - 1; i >= 0; --i) {
                    const HitShade& hs = plan->shade[static_cast<size_t>(begin + i)];
                    for (int ch = 0; ch < 3; ++ch) {
                        behind[static_cast<size_t>(i) * 3 + ch] = beh[ch];
                        beh[ch] = hs.alpha * hs.rgb[ch] + (1.0 - hs.alpha) * beh[ch];
                    }
                }

                for (int i = 0; i < n; ++i) {
                    const HitGeom& hit = plan->hits[static_cast<size_t>(begin + i)];
                    const HitShade& hs = plan->shade[static_cast<size_t>(begin + i)];
                    const double T = trans[static_cast<size_t>(i)];
                    double d_sample[4] = {0, 0, 0, 0}; // rgb, alpha
                    for (int ch = 0; ch < 3; ++ch) {
                        d_sample[ch] = gpix[ch] * T * hs.alpha;
                        d_sample[3] += gpix[ch] * T *
                                       (hs.rgb[ch] - behind[static_cast<size_t>(i) * 3 + ch]);
                    }

                    const TriSample ts = make_trisample(hs.u, v);
                    const float* pp = pi->data.data() + static_cast<size_t>(hit.prim) * 4 * vvv;
                    float* gp = want_p ? pi->grad.data() + static_cast<size_t>(hit.prim) * 4 * vvv
                                       : nullptr;
                    double db[3] = {0, 0, 0}; // d/d(fractional voxel coords)
                    for (int ch = 0; ch < 4; ++ch) {
                        const float* q = pp + ch * vvv;
                        float* gq = gp ? gp + ch * vvv : nullptr;
                        const double gs = d_sample[ch];
                        if (gs == 0.0) continue;
                        for (int dz = 0; dz < 2; ++dz)
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx) {
                                    const double wz = dz ? ts.b[2] : 1.0 - ts.b[2];
                                    const double wy = dy ? ts.b[1] : 1.0 - ts.b[1];
                                    const double wx = dx ? ts.b[0] : 1.0 - ts.b[0];
                                    const int at = (ts.c0[2] + dz) * vv + (ts.c0[1] + dy) * v +
                                                   (ts.c0[0] + dx);
                                    if (gq) gq[at] += static_cast<float>(gs * wz * wy * wx);
                                    const double pv = q[at];
                                    db[0] += gs * (dx ? 1.0 : -1.0) * wz * wy * pv;
                                    db[1] += gs * (dy ? 1.0 : -1.0) * wz * wx * pv;
                                    db[2] += gs * (dz ? 1.0 : -1.0) * wy * wx * pv;
                                }
                    }
                    if (!want_c && !want_s) continue;

                    // d(fractional)/d(u): x and z scale by (v-1), y is flipped.
                    const double du[3] = {db[0] * (v - 1), -db[1] * (v - 1), db[2] * (v - 1)};
                    const double s = si->data[hit.prim];
                    const double inv2s = 1.0 / (2.0 * s);
                    double dc[3] = {0, 0, 0};
                    double dscale = 0.0;
                    double dtm = 0.0;
                    for (int a = 0; a < 3; ++a) {
                        dc[a] -= du[a] * inv2s;
                        dscale += du[a] * (1.0 - 2.0 * hs.u[a]) * inv2s;
                        dtm += du[a] * plan->dir[a] * inv2s;
                    }
                    const double dt = 0.5 * dtm;
                    if (hit.axis0 >= 0) {
                        const double invd = 1.0 / plan->dir[hit.axis0];
                        dc[hit.axis0] += dt * invd;
                        dscale += dt * hit.sign0 * invd;
                    }
                    if (hit.axis1 >= 0) {
                        const double invd = 1.0 / plan->dir[hit.axis1];
                        dc[hit.axis1] += dt * invd;
                        dscale += dt * hit.sign1 * invd;
                    }
                    if (want_c)
                        for (int a = 0; a < 3; ++a)
                            ci->grad[hit.prim * 3 + a] += static_cast<float>(dc[a]);
                    if (want_s) si->grad[hit.prim] += static_cast<float>(dscale);
                }
            }
        });
    }
    return out;
}

Tensor AvatarNet::forward(Tape& tape, const ParamStore& params, const IdentityInput& id_in,
                          const Tensor& e, const ViewSpec& view) const {
    auto bias_maps = identity_encode(tape, params, id_in);
    Tensor z_e = expression_encode(tape, params, e);
    PrimitiveSlab slab = decode(tape, params, bias_maps, z_e);
    return render(tape, slab, view);
}

std::vector<Tensor> AvatarNet::forward_batch(
    Tape& tape, const ParamStore& params, const IdentityInput& id_in,
    const std::vector<std::pair<ViewSpec, Tensor>>& draws) const {
    auto bias_maps = identity_encode(tape, params, id_in);
    std::vector<Tensor> out;
    out.reserve(draws.size());
    for (const auto& [view, e] : draws) {
        Tensor z_e = expression_encode(tape, params, e);
        PrimitiveSlab slab = decode(tape, params, bias_maps, z_e);
        out.push_back(render(tape, slab, view));
    }
    return out;
}

std::vector<Tensor> expression_presets(int expr_dim) {
    // rows: [smile, jaw-open, eye-open, brow-raise], remaining dims zero
    const float rows[5][4] = {{0.0f, 0.0f, 1.0f, 0.0f},
                              {0.9f, 0.1f, 1.0f, 0.2f},
                              {-0.8f, 0.05f, 1.0f, -0.3f},
                              {0.1f, 0.9f, 1.2f, 0.5f},
                              {0.2f, 0.0f, 0.1f, 0.0f}};
    std::vector<Tensor> out;
    for (const auto& row : rows) {
        Tensor e = Tensor::zeros({expr_dim});
        for (int i = 0; i < 4 && i < expr_dim; ++i) e.data_mut()[i] = row[i];
        out.push_back(e);
    }
    return out;
}

double pretrain_eval_loss(const AvatarNet& net, const ParamStore& params,
                          const PretrainDataset& data) {
    if (data.samples.empty()) throw UsageError("pretrain_eval_loss: empty dataset");
    double acc = 0.0;
    for (const auto& s : data.samples) {
        Tape tape;
        Tensor img = net.forward(tape, params, data.identities[static_cast<size_t>(s.identity)],
                                 s.e, s.view);
        double l = 0.0;
        auto ip = img.data();
        auto tp = s.image.data();
        for (size_t i = 0; i < ip.size(); ++i) {
            const double d = static_cast<double>(ip[i]) - tp[i];
            l += d * d;
        }
        acc += l / static_cast<double>(ip.size());
    }
    return acc / static_cast<double>(data.samples.size());
}

PretrainStats pretrain_photoreal(const AvatarNet& net, ParamStore& params,
                                 const PretrainDataset& data, int steps, double lr, Rng& rng,
                                 const std::function<void(int, double)>& on_step) {
    if (data.samples.empty()) throw UsageError("pretrain_photoreal: empty dataset");
    PretrainStats stats;
    stats.loss_before = pretrain_eval_loss(net, params, data);
    params.set_requires_grad(Selector::All, true);
    for (int step = 0; step < steps; ++step) {
        const auto& s = data.samples[rng.below(data.samples.size())];
        Tape tape;
        Tensor img = net.forward(tape, params, data.identities[static_cast<size_t>(s.identity)],
                                 s.e, s.view);
        Tensor diff = sub(tape, img, s.image);
        Tensor loss = reduce_mean(tape, mul(tape, diff, diff));
        const double lv = loss.item();
        if (!std::isfinite(lv))
            throw NumericError("pretrain diverged at step " + std::to_string(step));
        params.zero_grads(Selector::All);
        backward(tape, loss);
        params.sgd_step(lr, Selector::All);
        stats.step_losses.push_back(lv);
        if (on_step) on_step(step, lv);
    }
    stats.loss_after = pretrain_eval_loss(net, params, data);
    return stats;
}

} // namespace avstyle
