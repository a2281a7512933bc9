#include "bevkit/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace bevkit {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::mt19937_64 substream(std::uint64_t seed, std::uint64_t salt) {
    return std::mt19937_64(splitmix64(seed ^ splitmix64(salt)));
}

struct BoxFrame {
    std::array<double, 3> center;
    std::array<double, 3> ex, ey, ez;  // body axes in world coordinates
    std::array<double, 3> half;
};

BoxFrame frame_of(const Box& b) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    return {{b.cx, b.cy, b.cz},
            {c, s, 0.0},
            {-s, c, 0.0},
            {0.0, 0.0, 1.0},
            {b.w / 2.0, b.l / 2.0, b.h / 2.0}};
}

std::array<double, 3> to_local(const BoxFrame& f, const std::array<double, 3>& p) {
    const std::array<double, 3> d{p[0] - f.center[0], p[1] - f.center[1],
                                  p[2] - f.center[2]};
    auto dot = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
        return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    };
    return {dot(d, f.ex), dot(d, f.ey), dot(d, f.ez)};
}

std::array<double, 3> local_dir(const BoxFrame& f, const std::array<double, 3>& v) {
    auto dot = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
        return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    };
    return {dot(v, f.ex), dot(v, f.ey), dot(v, f.ez)};
}

// Parametric overlap of a local-frame line a + t*d with the box; false when
// the line misses entirely.
bool slab_interval(const std::array<double, 3>& a, const std::array<double, 3>& d,
                   const std::array<double, 3>& half, double& t0, double& t1) {
    t0 = -std::numeric_limits<double>::infinity();
    t1 = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 3; ++i) {
        if (std::abs(d[i]) < 1e-12) {
            if (std::abs(a[i]) > half[i]) {
                return false;
            }
            continue;
        }
        double lo = (-half[i] - a[i]) / d[i];
        double hi = (half[i] - a[i]) / d[i];
        if (lo > hi) {
            std::swap(lo, hi);
        }
        t0 = std::max(t0, lo);
        t1 = std::min(t1, hi);
        if (t0 > t1) {
            return false;
        }
    }
    return true;
}

// First ray hit, t > 0; negative when the ray misses.
double ray_hit_box(const std::array<double, 3>& origin,
                   const std::array<double, 3>& dir, const Box& box) {
    const auto f = frame_of(box);
    const auto a = to_local(f, origin);
    const auto d = local_dir(f, dir);
    double t0 = 0.0, t1 = 0.0;
    if (!slab_interval(a, d, f.half, t0, t1) || t1 <= 1e-9) {
        return -1.0;
    }
    return std::max(t0, 1e-9);
}

}  // namespace

bool segment_hits_box(const std::array<double, 3>& a, const std::array<double, 3>& b,
                      const Box& box) {
    const auto f = frame_of(box);
    const auto la = to_local(f, a);
    const std::array<double, 3> dir{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
    const auto ld = local_dir(f, dir);
    double t0 = 0.0, t1 = 0.0;
    if (!slab_interval(la, ld, f.half, t0, t1)) {
        return false;
    }
    return t1 > 1e-9 && t0 < 1.0 - 1e-9 && t0 < t1;
}

double box_surface_distance(const Box& box, const PointXYZI& p) {
    const auto f = frame_of(box);
    const auto q = to_local(f, {p.x, p.y, p.z});
    std::array<double, 3> excess{};
    double inside = -std::numeric_limits<double>::infinity();
    bool outside = false;
    for (int i = 0; i < 3; ++i) {
        const double d = std::abs(q[i]) - f.half[i];
        inside = std::max(inside, d);
        if (d > 0.0) {
            excess[static_cast<std::size_t>(i)] = d;
            outside = true;
        }
    }
    if (outside) {
        return std::sqrt(excess[0] * excess[0] + excess[1] * excess[1] +
                         excess[2] * excess[2]);
    }
    return -inside;  // depth below the nearest face
}

CameraModel make_toy_camera(std::int64_t height, std::int64_t width) {
    CameraModel cam;
    cam.height = height;
    cam.width = width;
    const double fx = static_cast<double>(width) / 2.0;  // 90 degree horizontal fov
    const double fy = static_cast<double>(height) / 2.0;
    cam.intrinsics = {fx, 0.0, static_cast<double>(width) / 2.0,
                      0.0, fy,  static_cast<double>(height) / 2.0,
                      0.0, 0.0, 1.0};
    // Camera x right (-y ego), y down (-z ego), z forward (+x ego).
    cam.cam_to_ego = {0.0, 0.0, 1.0, 0.0,
                      -1.0, 0.0, 0.0, 0.0,
                      0.0, -1.0, 0.0, 1.2,
                      0.0, 0.0, 0.0, 1.0};
    cam.validate();
    return cam;
}

Scene generate_scene(std::uint64_t seed, const SceneGenConfig& cfg) {
    cfg.grid.validate();
    require(cfg.image_channels >= cfg.num_classes,
            "generate_scene: need one image channel per class");
    require(cfg.min_boxes >= 0 && cfg.max_boxes >= cfg.min_boxes,
            "generate_scene: invalid box count range");
    require(cfg.lidar_absorb_prob >= 0.0 && cfg.lidar_absorb_prob <= 1.0 &&
                cfg.lidar_absorb_keep >= 0.0 && cfg.lidar_absorb_keep <= 1.0,
            "generate_scene: absorption parameters must be fractions");
    require(cfg.depth_scale > 0.0, "generate_scene: depth_scale must be positive");

    Scene scene;
    scene.seed = seed;
    scene.camera = make_toy_camera(cfg.image_height, cfg.image_width);

    if (!cfg.fixed_boxes.empty()) {
        scene.boxes = cfg.fixed_boxes;
    } else {
        auto rng = substream(seed, 0xb0);
        std::uniform_int_distribution<std::int64_t> count_dist(cfg.min_boxes,
                                                               cfg.max_boxes);
        std::uniform_int_distribution<std::int64_t> cls_dist(0, cfg.num_classes - 1);
        std::uniform_real_distribution<double> ud(0.0, 1.0);
        const auto target = count_dist(rng);
        for (int attempt = 0; attempt < 200 &&
                              static_cast<std::int64_t>(scene.boxes.size()) < target;
             ++attempt) {
            Box b;
            b.w = 1.8 + 1.4 * ud(rng);
            b.l = 1.8 + 1.4 * ud(rng);
            b.h = 1.2 + 1.0 * ud(rng);
            b.cx = 2.8 + 4.2 * ud(rng);
            const double ymax = std::min(0.7 * b.cx, 6.5);
            b.cy = (2.0 * ud(rng) - 1.0) * ymax;
            b.cz = b.h / 2.0;
            b.yaw = kPi * ud(rng);
            b.cls = cls_dist(rng);
            bool ok = true;
            for (const auto& other : scene.boxes) {
                const double dx = b.cx - other.cx, dy = b.cy - other.cy;
                const double need = (std::max(b.w, b.l) + std::max(other.w, other.l)) / 2.0 + 0.3;
                if (dx * dx + dy * dy < need * need) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                scene.boxes.push_back(b);
            }
        }
    }

    const auto& sensor = cfg.sensor;
    auto keep_prob = [](double r) { return std::clamp(1.2 - r / 10.0, 0.3, 1.0); };

    // Box surfaces: per-box substreams keep a box's candidate points stable
    // under changes to the rest of the scene.
    for (std::size_t bi = 0; bi < scene.boxes.size(); ++bi) {
        const auto& box = scene.boxes[bi];
        const auto f = frame_of(box);
        auto rng = substream(seed, 0x50 + bi);
        std::uniform_real_distribution<double> ud(0.0, 1.0);
        const double absorb_keep =
            ud(rng) < cfg.lidar_absorb_prob ? cfg.lidar_absorb_keep : 1.0;

        const double areas[3] = {box.l * box.h, box.w * box.h, box.w * box.l};
        const double total = 2.0 * (areas[0] + areas[1] + areas[2]);
        for (std::int64_t k = 0; k < cfg.points_per_box; ++k) {
            double pick = ud(rng) * total;
            int axis = 0;
            double sign = 1.0;
            for (int i = 0; i < 3; ++i) {
                if (pick < areas[i]) {
                    axis = i;
                    sign = 1.0;
                    break;
                }
                pick -= areas[i];
                if (pick < areas[i]) {
                    axis = i;
                    sign = -1.0;
                    break;
                }
                pick -= areas[i];
            }
            std::array<double, 3> local{};
            local[static_cast<std::size_t>(axis)] = sign * f.half[static_cast<std::size_t>(axis)];
            const int u_axis = (axis + 1) % 3, v_axis = (axis + 2) % 3;
            local[static_cast<std::size_t>(u_axis)] =
                (2.0 * ud(rng) - 1.0) * f.half[static_cast<std::size_t>(u_axis)];
            local[static_cast<std::size_t>(v_axis)] =
                (2.0 * ud(rng) - 1.0) * f.half[static_cast<std::size_t>(v_axis)];

            std::array<double, 3> world{};
            const std::array<std::array<double, 3>, 3> axes{f.ex, f.ey, f.ez};
            for (int i = 0; i < 3; ++i) {
                world[static_cast<std::size_t>(i)] =
                    f.center[static_cast<std::size_t>(i)] +
                    local[0] * axes[0][static_cast<std::size_t>(i)] +
                    local[1] * axes[1][static_cast<std::size_t>(i)] +
                    local[2] * axes[2][static_cast<std::size_t>(i)];
            }

            // Face must look toward the sensor.
            const auto& n = axes[static_cast<std::size_t>(axis)];
            const double facing = sign * (n[0] * (sensor[0] - world[0]) +
                                          n[1] * (sensor[1] - world[1]) +
                                          n[2] * (sensor[2] - world[2]));
            const double dropout_draw = ud(rng);  // drawn always, keeps streams aligned
            if (facing <= 0.0) {
                continue;
            }
            const double r = std::sqrt((world[0] - sensor[0]) * (world[0] - sensor[0]) +
                                       (world[1] - sensor[1]) * (world[1] - sensor[1]) +
                                       (world[2] - sensor[2]) * (world[2] - sensor[2]));
            if (dropout_draw > keep_prob(r) * absorb_keep) {
                continue;
            }
            bool shadowed = false;
            for (std::size_t oi = 0; oi < scene.boxes.size(); ++oi) {
                if (oi != bi && segment_hits_box(sensor, world, scene.boxes[oi])) {
                    shadowed = true;
                    break;
                }
            }
            if (shadowed) {
                continue;
            }
            scene.points.push_back({world[0], world[1], world[2],
                                    0.3 + 0.15 * static_cast<double>(box.cls)});
        }
    }

    // Ground plane: one jittered sample per BEV cell.
    {
        auto rng = substream(seed, 0x6d);
        std::uniform_real_distribution<double> ud(0.0, 1.0);
        const auto bins = cfg.grid.bins();
        for (std::int64_t iy = 0; iy < bins[1]; ++iy) {
            for (std::int64_t ix = 0; ix < bins[0]; ++ix) {
                const double px = cfg.grid.min_corner[0] +
                                  (static_cast<double>(ix) + ud(rng)) * cfg.grid.voxel_size[0];
                const double py = cfg.grid.min_corner[1] +
                                  (static_cast<double>(iy) + ud(rng)) * cfg.grid.voxel_size[1];
                const double sel = ud(rng);
                const double drop = ud(rng);
                if (sel > cfg.ground_keep) {
                    continue;
                }
                const double r = std::sqrt((px - sensor[0]) * (px - sensor[0]) +
                                           (py - sensor[1]) * (py - sensor[1]) +
                                           sensor[2] * sensor[2]);
                if (drop > keep_prob(r)) {
                    continue;
                }
                const std::array<double, 3> world{px, py, 0.0};
                bool shadowed = false;
                for (const auto& box : scene.boxes) {
                    if (segment_hits_box(sensor, world, box)) {
                        shadowed = true;
                        break;
                    }
                }
                if (!shadowed) {
                    scene.points.push_back({px, py, 0.0, cfg.intensity_ground});
                }
            }
        }
    }

    // Image: nearest-surface raycast per pixel writes 1 into the class
    // channel of the closest box. The sensor is depth-capable: one channel
    // carries the metric hit depth (boxes or ground plane, 0 for sky) and
    // the last two carry pixel-coordinate ramps. Every channel then gets
    // additive gaussian noise.
    {
        const auto& cam = scene.camera;
        const auto hw = cam.height * cam.width;
        std::vector<double> feat(
            static_cast<std::size_t>(cfg.image_channels * hw), 0.0);
        const bool aux_channels = cfg.image_channels >= cfg.num_classes + 3;
        const std::int64_t cd = cfg.image_channels - 3;
        const std::int64_t cu = cfg.image_channels - 2;
        const std::int64_t cv = cfg.image_channels - 1;
        const std::array<double, 3> origin{cam.cam_to_ego[3], cam.cam_to_ego[7],
                                           cam.cam_to_ego[11]};
        for (std::int64_t v = 0; v < cam.height; ++v) {
            for (std::int64_t u = 0; u < cam.width; ++u) {
                const auto far_pt = cam.unproject(static_cast<double>(u) + 0.5,
                                                  static_cast<double>(v) + 0.5, 1.0);
                const std::array<double, 3> dir{far_pt[0] - origin[0],
                                                far_pt[1] - origin[1],
                                                far_pt[2] - origin[2]};
                double best_t = std::numeric_limits<double>::infinity();
                std::int64_t best_cls = -1;
                for (const auto& box : scene.boxes) {
                    const double t = ray_hit_box(origin, dir, box);
                    if (t > 0.0 && t < best_t) {
                        best_t = t;
                        best_cls = box.cls;
                    }
                }
                if (best_cls >= 0) {
                    feat[static_cast<std::size_t>(best_cls * hw + v * cam.width + u)] = 1.0;
                }
                if (aux_channels) {
                    const auto px = static_cast<std::size_t>(v * cam.width + u);
                    double depth = best_t;
                    if (!std::isfinite(depth) && dir[2] < 0.0) {
                        depth = -origin[2] / dir[2];  // ground plane z=0
                    }
                    if (std::isfinite(depth)) {
                        feat[static_cast<std::size_t>(cd * hw) + px] =
                            depth / cfg.depth_scale;
                    }
                    feat[static_cast<std::size_t>(cu * hw) + px] =
                        (static_cast<double>(u) + 0.5) / static_cast<double>(cam.width);
                    feat[static_cast<std::size_t>(cv * hw) + px] =
                        (static_cast<double>(v) + 0.5) / static_cast<double>(cam.height);
                }
            }
        }
        auto rng = substream(seed, 0x1a);
        std::normal_distribution<double> noise(0.0, cfg.image_noise);
        if (cfg.image_noise > 0.0) {
            for (auto& x : feat) {
                x += noise(rng);
            }
        }
        scene.image_feat = Tensor::from(
            {cfg.image_channels, cam.height, cam.width}, std::move(feat));
    }

    return scene;
}

std::vector<Scene> generate_scenes(std::uint64_t seed0, std::int64_t count,
                                   const SceneGenConfig& cfg) {
    require(count >= 1, "generate_scenes: count must be positive");
    std::vector<Scene> scenes;
    scenes.reserve(std::size_t(count));
    for (std::int64_t i = 0; i < count; ++i) {
        scenes.push_back(generate_scene(seed0 + std::uint64_t(i), cfg));
    }
    return scenes;
}

void save_scene_json(const Scene& scene, const std::filesystem::path& path) {
    nlohmann::json j;
    j["seed"] = scene.seed;
    auto& pts = j["points"];
    pts = nlohmann::json::array();
    for (const auto& p : scene.points) {
        pts.push_back({p.x, p.y, p.z, p.intensity});
    }
    auto& boxes = j["boxes"];
    boxes = nlohmann::json::array();
    for (const auto& b : scene.boxes) {
        boxes.push_back({b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw,
                         static_cast<double>(b.cls)});
    }
    j["camera"] = {{"intrinsics", scene.camera.intrinsics},
                   {"cam_to_ego", scene.camera.cam_to_ego},
                   {"height", scene.camera.height},
                   {"width", scene.camera.width}};
    j["image_feat"] = {{"shape", scene.image_feat.shape()},
                       {"data", std::vector<double>(scene.image_feat.data().begin(),
                                                    scene.image_feat.data().end())}};
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
        fail("cannot open for writing: " + path.string());
    }
    os << j.dump() << '\n';
}

Scene load_scene_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        fail("cannot open: " + path.string());
    }
    nlohmann::json j = nlohmann::json::parse(is);
    Scene scene;
    scene.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& p : j.at("points")) {
        require(p.size() == 4, "scene point must have four components");
        scene.points.push_back({p[0].get<double>(), p[1].get<double>(),
                                p[2].get<double>(), p[3].get<double>()});
    }
    for (const auto& b : j.at("boxes")) {
        require(b.size() == 8, "scene box must have eight components");
        Box box;
        box.cx = b[0].get<double>();
        box.cy = b[1].get<double>();
        box.cz = b[2].get<double>();
        box.w = b[3].get<double>();
        box.l = b[4].get<double>();
        box.h = b[5].get<double>();
        box.yaw = b[6].get<double>();
        box.cls = static_cast<std::int64_t>(b[7].get<double>());
        scene.boxes.push_back(box);
    }
    const auto& cam = j.at("camera");
    scene.camera.intrinsics = cam.at("intrinsics").get<std::array<double, 9>>();
    scene.camera.cam_to_ego = cam.at("cam_to_ego").get<std::array<double, 16>>();
    scene.camera.height = cam.at("height").get<std::int64_t>();
    scene.camera.width = cam.at("width").get<std::int64_t>();
    scene.camera.validate();
    const auto& feat = j.at("image_feat");
    scene.image_feat = Tensor::from(feat.at("shape").get<Shape>(),
                                    feat.at("data").get<std::vector<double>>());
    return scene;
}

}  // namespace bevkit
