#include "avstyle/faces.hpp"

#include <algorithm>
#include <cmath>

namespace avstyle {

namespace {

struct Screen {
    double cy, sy, cp, sp;
    // world (x,y,z) -> screen (sx, sy) under the renderer's camera rotation
    void project(double x, double y, double z, double& ox, double& oy) const {
        ox = cy * x + sy * z;
        oy = sp * sy * x + cp * y - sp * cy * z;
    }
};

// Ellipse coverage with ~1.5px antialiasing; q is the normalized quadratic.
inline double ellipse_cov(double dx, double dy, double a, double b, double px_size) {
    const double q = (dx / a) * (dx / a) + (dy / b) * (dy / b);
    const double d = (std::sqrt(std::max(q, 1e-12)) - 1.0) * std::min(a, b);
    return std::clamp(0.5 - d / (1.5 * px_size), 0.0, 1.0);
}

inline void blend(float* dst, const float* color, double cov) {
    for (int c = 0; c < 3; ++c)
        dst[c] = static_cast<float>(dst[c] * (1.0 - cov) + color[c] * cov);
}

} // namespace

FaceIdentity canonical_identity() {
    FaceIdentity id{};
    id.skin[0] = 0.87f; id.skin[1] = 0.72f; id.skin[2] = 0.60f;
    id.hair[0] = 0.22f; id.hair[1] = 0.14f; id.hair[2] = 0.08f;
    id.eye[0] = 0.12f;  id.eye[1] = 0.15f;  id.eye[2] = 0.28f;
    id.lip[0] = 0.62f;  id.lip[1] = 0.26f;  id.lip[2] = 0.24f;
    id.head_a = 0.52f;
    id.head_b = 0.68f;
    id.head_depth = 0.48f;
    id.eye_dx = 0.21f;
    id.eye_y = 0.16f;
    id.eye_r = 0.075f;
    id.mouth_y = -0.32f;
    id.mouth_w = 0.20f;
    id.mouth_h = 0.055f;
    id.brow_y = 0.30f;
    return id;
}

FaceIdentity sample_identity(Rng& rng) {
    FaceIdentity id = canonical_identity();
    auto jit = [&](float& v, float lo, float hi) {
        v = std::clamp(v + rng.gaussf(0.5f) * (hi - lo) * 0.25f, lo, hi);
    };
    jit(id.skin[0], 0.45f, 0.95f);
    id.skin[1] = id.skin[0] * (0.75f + 0.10f * static_cast<float>(rng.uniform()));
    id.skin[2] = id.skin[1] * (0.72f + 0.12f * static_cast<float>(rng.uniform()));
    for (float& c : id.hair) c = 0.06f + 0.5f * static_cast<float>(rng.uniform());
    id.eye[2] = 0.2f + 0.5f * static_cast<float>(rng.uniform());
    jit(id.head_a, 0.44f, 0.58f);
    jit(id.head_b, 0.60f, 0.75f);
    jit(id.eye_dx, 0.16f, 0.26f);
    jit(id.eye_y, 0.10f, 0.22f);
    jit(id.eye_r, 0.055f, 0.095f);
    jit(id.mouth_y, -0.40f, -0.26f);
    jit(id.mouth_w, 0.14f, 0.26f);
    jit(id.mouth_h, 0.04f, 0.08f);
    return id;
}

Tensor face_image(const FaceIdentity& id, double yaw, double pitch, const Tensor& e, int h, int w) {
    const double smile = e.numel() > 0 ? e.at(0) : 0.0;
    const double open = e.numel() > 1 ? std::max(0.0f, e.at(1)) : 0.0;
    const double eye_open = e.numel() > 2 ? std::clamp(e.at(2), 0.05f, 1.4f) : 1.0;
    const double brow = e.numel() > 3 ? e.at(3) : 0.0;

    Screen sc{std::cos(yaw), std::sin(yaw), std::cos(pitch), std::sin(pitch)};
    const double px_size = 2.0 / h;
    const double zf = id.head_depth * 0.9; // feature depth on the face surface

    // Head outline under rotation: ellipsoid silhouette stays centered, its
    // horizontal extent blends head_a and head_depth.
    const double a_eff = std::sqrt(id.head_a * id.head_a * sc.cy * sc.cy +
                                   id.head_depth * id.head_depth * sc.sy * sc.sy);
    const double b_eff = std::sqrt(id.head_b * id.head_b * sc.cp * sc.cp +
                                   id.head_depth * id.head_depth * sc.sp * sc.sp);
    double head_cx, head_cy_s;
    sc.project(0.0, 0.0, 0.0, head_cx, head_cy_s);

    double ex_l, ey_l, ex_r, ey_r;
    sc.project(-id.eye_dx, id.eye_y, zf, ex_l, ey_l);
    sc.project(id.eye_dx, id.eye_y, zf, ex_r, ey_r);
    double bx_l, by_l, bx_r, by_r;
    const double brow_lift = 0.045 * brow;
    sc.project(-id.eye_dx, id.brow_y + brow_lift, zf, bx_l, by_l);
    sc.project(id.eye_dx, id.brow_y + brow_lift, zf, bx_r, by_r);
    double mx, my;
    sc.project(0.0, id.mouth_y, zf, mx, my);
    double hx, hy;
    sc.project(0.0, id.head_b * 0.62, 0.0, hx, hy);

    const double eye_vr = id.eye_r * (0.15 + 0.85 * eye_open);
    const double mouth_h = id.mouth_h * (0.35 + 1.6 * open);
    const double smile_amp = 0.085 * smile;
    const float dark_mouth[3] = {0.25f, 0.08f, 0.08f};

    Tensor img = Tensor::full({3, h, w}, kBackgroundGray);
    float* base = img.data_mut().data();
    const int plane = h * w;

    for (int y = 0; y < h; ++y) {
        const double py = 1.0 - (y + 0.5) / h * 2.0;
        for (int x = 0; x < w; ++x) {
            const double px = (x + 0.5) / w * 2.0 - 1.0;
            float pix[3] = {base[y * w + x], base[plane + y * w + x], base[2 * plane + y * w + x]};

            const double head_cov = ellipse_cov(px - head_cx, py - head_cy_s, a_eff, b_eff, px_size);
            if (head_cov > 0.0) {
                // lambert-ish side shading keyed to yaw
                const double shade = 1.0 - 0.22 * sc.sy * ((px - head_cx) / a_eff) -
                                     0.10 * std::abs(sc.sy);
                float skin[3];
                for (int c = 0; c < 3; ++c)
                    skin[c] = static_cast<float>(std::clamp(id.skin[c] * shade, 0.0, 1.0));
                blend(pix, skin, head_cov);

                const double hair_cov =
                    ellipse_cov(px - hx, py - hy, a_eff * 0.98, b_eff * 0.52, px_size);
                blend(pix, id.hair, hair_cov * head_cov);

                const double browc_l =
                    ellipse_cov(px - bx_l, py - by_l, id.eye_r * 1.25, id.eye_r * 0.34, px_size);
                const double browc_r =
                    ellipse_cov(px - bx_r, py - by_r, id.eye_r * 1.25, id.eye_r * 0.34, px_size);
                blend(pix, id.hair, (browc_l + browc_r) * head_cov);

                const double eyec_l = ellipse_cov(px - ex_l, py - ey_l, id.eye_r, eye_vr, px_size);
                const double eyec_r = ellipse_cov(px - ex_r, py - ey_r, id.eye_r, eye_vr, px_size);
                blend(pix, id.eye, (eyec_l + eyec_r) * head_cov);

                const double mdx = (px - mx) / id.mouth_w;
                const double mdy = py - my - smile_amp * (mdx * mdx - 0.5);
                const double mouth_cov =
                    ellipse_cov(mdx * id.mouth_w, mdy, id.mouth_w, mouth_h, px_size);
                blend(pix, id.lip, mouth_cov * head_cov);
                if (open > 0.25) {
                    const double inner_cov = ellipse_cov(mdx * id.mouth_w, mdy, id.mouth_w * 0.6,
                                                         mouth_h * 0.55, px_size);
                    blend(pix, dark_mouth, inner_cov * head_cov);
                }
            }
            base[y * w + x] = pix[0];
            base[plane + y * w + x] = pix[1];
            base[2 * plane + y * w + x] = pix[2];
        }
    }
    return img;
}

IdentityInput identity_maps(const FaceIdentity& id, const AvatarConfig& cfg) {
    const int mh = cfg.map_h, mw = cfg.map_w;
    IdentityInput out;
    out.position_map = Tensor::zeros({3, mh, mw});
    auto pm = out.position_map.data_mut();
    for (int y = 0; y < mh; ++y)
        for (int x = 0; x < mw; ++x) {
            const double px = (x + 0.5) / mw * 2.0 - 1.0;
            const double py = 1.0 - (y + 0.5) / mh * 2.0;
            const double q = (px / id.head_a) * (px / id.head_a) + (py / id.head_b) * (py / id.head_b);
            pm[0 * mh * mw + y * mw + x] = static_cast<float>(px);
            pm[1 * mh * mw + y * mw + x] = static_cast<float>(py);
            pm[2 * mh * mw + y * mw + x] = static_cast<float>(std::clamp(1.0 - q, -1.0, 1.0));
        }

    // Texture map: box-downsampled front neutral rendering.
    const int scale = 4;
    const int fh = mh * scale, fw = mw * scale;
    Tensor neutral = Tensor::zeros({cfg.expr_dim});
    neutral.data_mut()[2] = 1.0f;
    Tensor front = face_image(id, 0.0, 0.0, neutral, fh, fw);
    out.texture_map = Tensor::zeros({3, mh, mw});
    auto tm = out.texture_map.data_mut();
    auto fp = front.data();
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < mh; ++y)
            for (int x = 0; x < mw; ++x) {
                double acc = 0.0;
                for (int dy = 0; dy < scale; ++dy)
                    for (int dx = 0; dx < scale; ++dx)
                        acc += fp[(c * fh + y * scale + dy) * fw + x * scale + dx];
                tm[(c * mh + y) * mw + x] = static_cast<float>(acc / (scale * scale));
            }
    return out;
}

std::vector<FaceIdentity> make_identities(uint64_t seed, int count) {
    std::vector<FaceIdentity> ids;
    ids.push_back(canonical_identity());
    for (int i = 1; i < count; ++i) {
        Rng rng(mix_keys(seed, 0xFACE, static_cast<uint64_t>(i)));
        ids.push_back(sample_identity(rng));
    }
    return ids;
}

PretrainDataset make_face_dataset(const AvatarConfig& cfg, uint64_t seed, int n_identities) {
    if (n_identities < 1) throw UsageError("make_face_dataset: need at least one identity");
    PretrainDataset data;
    const auto identities = make_identities(seed, n_identities);
    const auto presets = expression_presets(cfg.expr_dim);
    for (int i = 0; i < n_identities; ++i)
        data.identities.push_back(identity_maps(identities[static_cast<size_t>(i)], cfg));
    for (int i = 0; i < n_identities; ++i)
        for (size_t ei = 0; ei < presets.size(); ++ei)
            for (double yaw : face_yaw_grid()) {
                PretrainSample s;
                s.identity = i;
                s.e = presets[ei].clone();
                s.view = ViewSpec{yaw, 0.0};
                s.image = face_image(identities[static_cast<size_t>(i)], yaw, 0.0, s.e,
                                     cfg.img_h, cfg.img_w);
                data.samples.push_back(std::move(s));
            }
    return data;
}

std::vector<PretrainSample> held_out_samples(const AvatarConfig& cfg, uint64_t seed, int identity,
                                             int count) {
    const auto identities = make_identities(seed, identity + 1);
    const FaceIdentity& id = identities[static_cast<size_t>(identity)];
    const auto presets = expression_presets(cfg.expr_dim);
    Rng rng(mix_keys(seed, 0x4E1D, static_cast<uint64_t>(identity)));
    std::vector<PretrainSample> out;
    for (int i = 0; i < count; ++i) {
        PretrainSample s;
        s.identity = identity;
        s.view = ViewSpec{rng.uniform(-0.45, 0.45), rng.uniform(-0.08, 0.08)};
        s.e = presets[rng.below(presets.size())].clone();
        for (int d = 0; d < std::min(4, cfg.expr_dim); ++d)
            s.e.data_mut()[d] += rng.gaussf(0.06f);
        s.image = face_image(id, s.view.yaw, s.view.pitch, s.e, cfg.img_h, cfg.img_w);
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace avstyle
