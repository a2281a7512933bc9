#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "bevkit/geometry.hpp"
#include "bevkit/lss.hpp"
#include "bevkit/tensor.hpp"

namespace bevkit {

/// Upright box: full extents (w,l,h) along the body axes, yawed about z.
struct Box {
    double cx = 0.0, cy = 0.0, cz = 0.0;
    double w = 1.0, l = 1.0, h = 1.0;
    double yaw = 0.0;
    std::int64_t cls = 0;
};

struct SceneGenConfig {
    VoxelizationConfig grid{{-8.0, -8.0, -1.0}, {8.0, 8.0, 3.0}, {0.25, 0.25, 0.5}};
    std::int64_t min_boxes = 2;
    std::int64_t max_boxes = 4;
    std::int64_t num_classes = 4;

    std::array<double, 3> sensor{0.0, 0.0, 1.6};
    std::int64_t points_per_box = 480;  // surface candidates before culling
    double ground_keep = 1.0;           // fraction of ground-cell samples
    double intensity_ground = 0.1;

    // A lidar-absorbing box returns no lidar points at all while staying
    // fully visible to the camera, so detecting it requires the image branch.
    double lidar_absorb_prob = 0.4;
    double lidar_absorb_keep = 0.0;

    std::int64_t image_height = 32;
    std::int64_t image_width = 32;
    std::int64_t image_channels = 8;
    double image_noise = 0.05;
    double depth_scale = 16.0;  // divisor for the metric depth channel

    /// When non-empty these boxes are used verbatim instead of sampling.
    std::vector<Box> fixed_boxes;
};

struct Scene {
    std::uint64_t seed = 0;
    std::vector<PointXYZI> points;
    std::vector<Box> boxes;
    CameraModel camera;
    Tensor image_feat;  // [C_i, H, W]
};

/// Toy forward camera: at (0,0,1.2) looking along +x, 90 degree field of view.
CameraModel make_toy_camera(std::int64_t height, std::int64_t width);

/// Deterministic scene: boxes inside the camera frustum, surface-sampled
/// lidar with range dropout, per-box absorption and occlusion shadowing,
/// jittered-grid ground returns, and a class-colored raycast image. The
/// last three image channels carry scaled hit depth and pixel-coordinate
/// ramps; every channel gets additive noise.
Scene generate_scene(std::uint64_t seed, const SceneGenConfig& cfg);

/// Scenes for seeds seed0 .. seed0+count-1.
std::vector<Scene> generate_scenes(std::uint64_t seed0, std::int64_t count,
                                   const SceneGenConfig& cfg);

void save_scene_json(const Scene& scene, const std::filesystem::path& path);
Scene load_scene_json(const std::filesystem::path& path);

/// Distance from a point to the box surface (0 on the surface, >0 outside
/// or inside).
double box_surface_distance(const Box& box, const PointXYZI& p);

/// True when the open segment from `a` to `b` passes through the box.
bool segment_hits_box(const std::array<double, 3>& a, const std::array<double, 3>& b,
                      const Box& box);

}  // namespace bevkit
