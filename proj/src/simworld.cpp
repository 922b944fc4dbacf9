#include "lanekeeper/simworld.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace lanekeeper {

namespace {

constexpr double kPi = std::numbers::pi;

// Sections of the reference path, counter-clockwise from the bottom straight.
struct Section {
  bool straight;
  double start;   // arc position
  double length;
};

std::array<Section, 8> sections(const TrackSpec& t) {
  const double q = 0.5 * kPi * t.corner_radius;
  std::array<Section, 8> out{};
  double s = 0.0;
  for (int i = 0; i < 8; ++i) {
    const bool straight = i % 2 == 0;
    out[i] = {straight, s, straight ? t.straight_length : q};
    s += out[i].length;
  }
  return out;
}

double wrap_s(double s, double length) {
  s = std::fmod(s, length);
  return s < 0.0 ? s + length : s;
}

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct ReferenceSample {
  double x, y;          // point on the reference path
  double ox, oy;        // outward unit normal
  double heading;       // travel direction
};

ReferenceSample reference_at(const TrackSpec& t, double s) {
  const double h = 0.5 * t.straight_length;
  const double r = t.corner_radius;
  s = wrap_s(s, t.reference_length());
  const auto secs = sections(t);
  int idx = 7;
  for (int i = 0; i < 8; ++i) {
    if (s < secs[i].start + secs[i].length) {
      idx = i;
      break;
    }
  }
  const double u = s - secs[idx].start;
  switch (idx) {
    case 0: return {-h + u, -h - r, 0.0, -1.0, 0.0};
    case 2: return {h + r, -h + u, 1.0, 0.0, 0.5 * kPi};
    case 4: return {h - u, h + r, 0.0, 1.0, kPi};
    case 6: return {-h - r, h - u, -1.0, 0.0, -0.5 * kPi};
    default: break;
  }
  // Corners: centers at (+h,-h), (+h,+h), (-h,+h), (-h,-h); start angles
  // -pi/2, 0, pi/2, pi.
  const int corner = idx / 2;
  const double cx = (corner == 0 || corner == 1) ? h : -h;
  const double cy = (corner == 1 || corner == 2) ? h : -h;
  const double phi = -0.5 * kPi + corner * 0.5 * kPi + u / r;
  const double c = std::cos(phi), sn = std::sin(phi);
  return {cx + r * c, cy + r * sn, c, sn, normalize_angle(phi + 0.5 * kPi)};
}

// Signed offset from the reference path without computing the arc position.
inline double offset_only(double x, double y, double h, double r) {
  const double qx = std::clamp(x, -h, h), qy = std::clamp(y, -h, h);
  const double dx = x - qx, dy = y - qy;
  if (dx == 0.0 && dy == 0.0) return -std::min(h - std::abs(x), h - std::abs(y)) - r;
  return std::sqrt(dx * dx + dy * dy) - r;
}

}  // namespace

Lane parse_lane(std::string_view name) {
  if (name == "inner") return Lane::kInner;
  if (name == "outer") return Lane::kOuter;
  throw std::invalid_argument("unknown lane: " + std::string(name));
}

std::string_view to_string(Lane lane) { return lane == Lane::kInner ? "inner" : "outer"; }

void TrackSpec::validate() const {
  if (!(straight_length > 0.0)) throw std::invalid_argument("TrackSpec: straight_length must be positive");
  if (!(corner_radius > 0.0)) throw std::invalid_argument("TrackSpec: corner_radius must be positive");
  if (!(line_width > 0.0 && lane_width > line_width)) {
    throw std::invalid_argument("TrackSpec: need lane_width > line_width > 0");
  }
  if (!(corner_radius > lane_width)) {
    throw std::invalid_argument("TrackSpec: corner_radius must exceed lane_width (inner edge radius > 0)");
  }
  if (!(line_fade >= 0.0 && line_fade <= 1.0)) throw std::invalid_argument("TrackSpec: line_fade in [0,1]");
  if (!(marker_length > 0.0)) throw std::invalid_argument("TrackSpec: marker_length must be positive");
  for (const auto& m : markers) {
    if (!on_straight(m.s, marker_length)) {
      throw std::invalid_argument("TrackSpec: markers must lie on a straight section");
    }
  }
}

double TrackSpec::reference_length() const { return 4.0 * straight_length + 2.0 * kPi * corner_radius; }

double TrackSpec::lane_offset(Lane which) const {
  return which == Lane::kInner ? -0.5 * lane_width : 0.5 * lane_width;
}

double TrackSpec::lap_length(Lane which) const {
  return 4.0 * straight_length + 2.0 * kPi * (corner_radius + lane_offset(which));
}

bool TrackSpec::on_straight(double s, double len) const {
  s = wrap_s(s, reference_length());
  for (const auto& sec : sections(*this)) {
    if (sec.straight && s >= sec.start && s + len <= sec.start + sec.length) return true;
  }
  return false;
}

TrackPoint to_track(const TrackSpec& t, double x, double y) {
  const double h = 0.5 * t.straight_length;
  const double r = t.corner_radius;
  const double q = 0.5 * kPi * r;
  const double S = t.straight_length;
  const double qx = std::clamp(x, -h, h), qy = std::clamp(y, -h, h);
  const double dx = x - qx, dy = y - qy;

  if (dx == 0.0 && dy == 0.0) {
    // Inside the square: attach to the nearest side.
    const double bottom = y + h, right = h - x, top = h - y, left = x + h;
    const double m = std::min({bottom, right, top, left});
    if (m == bottom) return {x + h, -m - r};
    if (m == right) return {S + q + (y + h), -m - r};
    if (m == top) return {2 * S + 2 * q + (h - x), -m - r};
    return {3 * S + 3 * q + (h - y), -m - r};
  }
  if (dx != 0.0 && dy != 0.0) {
    const double n = std::hypot(dx, dy) - r;
    const double ang = std::atan2(dy, dx);
    if (dx > 0 && dy < 0) return {S + r * (ang + 0.5 * kPi), n};
    if (dx > 0 && dy > 0) return {2 * S + q + r * ang, n};
    if (dx < 0 && dy > 0) return {3 * S + 2 * q + r * (ang - 0.5 * kPi), n};
    return {4 * S + 3 * q + r * (ang + kPi), n};
  }
  if (dy < 0) return {x + h, -dy - r};
  if (dx > 0) return {S + q + (y + h), dx - r};
  if (dy > 0) return {2 * S + 2 * q + (h - x), dy - r};
  return {3 * S + 3 * q + (h - y), -dx - r};
}

double normalize_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

VehiclePose pose_on_track(const TrackSpec& track, double s, double n) {
  const ReferenceSample ref = reference_at(track, s);
  return {ref.x + n * ref.ox, ref.y + n * ref.oy, ref.heading, 0.0};
}

VehiclePose start_pose(const TrackSpec& track, double behind) {
  double s0 = 0.0;
  for (const auto& m : track.markers) {
    if (m.lane == track.lane) {
      s0 = m.s;
      break;
    }
  }
  return pose_on_track(track, s0 - behind, track.lane_offset());
}

VehiclePose step(const VehiclePose& pose, const TwistCommand& cmd, double dt) {
  VehiclePose next = pose;
  next.x += cmd.linear_x * std::cos(pose.heading) * dt;
  next.y += cmd.linear_x * std::sin(pose.heading) * dt;
  next.heading = normalize_angle(pose.heading + cmd.angular_z * dt);
  next.odometer += std::abs(cmd.linear_x) * dt;
  return next;
}

double cross_track_error(const TrackSpec& track, const VehiclePose& pose) {
  const TrackPoint tp = to_track(track, pose.x, pose.y);
  return track.lane_offset() - tp.n;
}

void CameraModel::validate() const {
  if (output_width < 1 || output_height < 1) throw std::invalid_argument("CameraModel: bad output size");
  if (output_width > native_width || output_height > native_height) {
    throw std::invalid_argument("CameraModel: output larger than native sensor");
  }
  if (!(pitch_down > 0.0)) throw std::invalid_argument("CameraModel: pitch_down must be positive");
  if (!(horizontal_fov > 0.0 && horizontal_fov < kPi)) throw std::invalid_argument("CameraModel: bad fov");
  if (!(mount_height > 0.0)) throw std::invalid_argument("CameraModel: mount_height must be positive");
}

double CameraModel::focal_px() const { return 0.5 * output_width / std::tan(0.5 * horizontal_fov); }

double CameraModel::horizon_row() const { return 0.5 * output_height - focal_px() * std::tan(pitch_down); }

void WeatherCondition::validate() const {
  if (!(brightness_gain > 0.0) || !(contrast > 0.0)) throw std::invalid_argument("Weather: gains must be positive");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("Weather: noise_sigma must be >= 0");
  if (!(line_fade >= 0.0 && line_fade <= 1.0)) throw std::invalid_argument("Weather: line_fade in [0,1]");
}

const std::vector<std::string>& weather_preset_names() {
  static const std::vector<std::string> names{"clear", "overcast", "rain", "glare", "dusk"};
  return names;
}

WeatherCondition weather_preset(std::string_view name, std::uint64_t seed) {
  WeatherCondition w;
  w.name = std::string(name);
  w.rng_seed = seed;
  if (name == "clear") return w;
  if (name == "overcast") {
    w.brightness_gain = 0.75;
    w.contrast = 0.8;
    w.noise_sigma = 4.0;
    w.line_fade = 0.9;
    return w;
  }
  if (name == "rain") {
    w.brightness_gain = 0.7;
    w.contrast = 0.85;
    w.noise_sigma = 12.0;
    w.line_fade = 0.6;
    return w;
  }
  if (name == "dusk") {
    w.brightness_gain = 0.4;
    w.noise_sigma = 3.0;
    w.line_fade = 0.9;
    return w;
  }
  if (name == "glare") {
    w.brightness_gain = 1.4;
    w.contrast = 1.1;
    w.noise_sigma = 3.0;
    std::mt19937_64 rng(mix64(seed ^ 0x6c617265ULL));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int i = 0; i < 3; ++i) {
      GlareBlob b;
      b.cx = unit(rng);
      b.cy = 0.15 + 0.7 * unit(rng);
      b.radius = 0.06 + 0.06 * unit(rng);
      b.intensity = 50.0 + 30.0 * unit(rng);
      w.glare_blobs.push_back(b);
    }
    // Tree shadows beside the outer edge of the bottom and right straights.
    const TrackSpec ref;
    for (int i = 0; i < 4; ++i) {
      const double s = (i < 2 ? 5.0 : ref.straight_length + 0.5 * kPi * ref.corner_radius + 5.0) +
                       25.0 * unit(rng) * 0.5 + (i % 2) * 12.0;
      const double n0 = 0.6 + 2.0 * unit(rng);
      const double len = 1.5 + 1.5 * unit(rng);
      const double wid = 1.0 + 1.0 * unit(rng);
      const auto a = pose_on_track(ref, s, n0);
      const auto b = pose_on_track(ref, s + len, n0);
      const auto c = pose_on_track(ref, s + len, n0 + wid);
      const auto d = pose_on_track(ref, s, n0 + wid);
      w.shadow_polygons.push_back({{{{a.x, a.y}, {b.x, b.y}, {c.x, c.y}, {d.x, d.y}}}, 0.55});
    }
    return w;
  }
  throw std::invalid_argument("unknown weather preset: " + std::string(name));
}

Renderer::Renderer(TrackSpec track, CameraModel camera) : track_(std::move(track)), camera_(camera) {
  track_.validate();
  camera_.validate();
  const int w = camera_.output_width, h = camera_.output_height;
  const double f = camera_.focal_px();
  const double ca = std::cos(camera_.pitch_down), sa = std::sin(camera_.pitch_down);
  row_forward_.assign(h, 0.0);
  row_range_.assign(h, 0.0);
  column_offset_.resize(w);
  for (int x = 0; x < w; ++x) column_offset_[x] = (x + 0.5 - 0.5 * w) / f;
  first_ground_row_ = h;
  for (int y = h - 1; y >= 0; --y) {
    const double yc = (y + 0.5 - 0.5 * h) / f;
    const double denom = yc * ca + sa;
    if (denom <= 1e-4) break;
    const double t = camera_.mount_height / denom;
    row_forward_[y] = t * (ca - yc * sa);
    row_range_[y] = t;
    first_ground_row_ = y;
  }
}

RenderedFrame Renderer::render(const VehiclePose& pose, const WeatherCondition& weather,
                               std::uint64_t frame_index) const {
  weather.validate();
  const int w = camera_.output_width, h = camera_.output_height;
  RenderedFrame out{ImageBuffer(w, h, 3), ImageBuffer(w, h, 1)};

  const double half = 0.5 * track_.straight_length;
  const double r = track_.corner_radius;
  const double lw2 = 0.5 * track_.line_width;
  const double lane_w = track_.lane_width;
  const double fade = track_.line_fade * weather.line_fade;
  const double line_value = surface::kLine * fade;

  struct MarkerBand {
    double s0, s1, n0, n1;
    double x0, y0, x1, y1;  // world bounding box, so most pixels skip to_track
  };
  std::vector<MarkerBand> bands;
  for (const auto& m : track_.markers) {
    const double c = track_.lane_offset(m.lane);
    const double inner_edge = 0.5 * lane_w - lw2 - 0.05;
    MarkerBand b = m.lane == Lane::kOuter
                       ? MarkerBand{m.s, m.s + track_.marker_length, c + 0.15, c + inner_edge, 0, 0, 0, 0}
                       : MarkerBand{m.s, m.s + track_.marker_length, c - inner_edge, c - 0.15, 0, 0, 0, 0};
    b.x0 = b.y0 = INFINITY;
    b.x1 = b.y1 = -INFINITY;
    constexpr int kSamples = 16;
    for (int i = 0; i <= kSamples; ++i) {
      for (const double n : {b.n0, b.n1}) {
        const VehiclePose p = pose_on_track(track_, b.s0 + (b.s1 - b.s0) * i / kSamples, n);
        b.x0 = std::min(b.x0, p.x), b.x1 = std::max(b.x1, p.x);
        b.y0 = std::min(b.y0, p.y), b.y1 = std::max(b.y1, p.y);
      }
    }
    const double margin = 0.1;
    b.x0 -= margin, b.y0 -= margin, b.x1 += margin, b.y1 += margin;
    bands.push_back(b);
  }

  // Photometric response (contrast about mid-gray, then gain) tabulated over
  // the integer surface values.
  std::array<double, 256> response{};
  std::array<std::uint8_t, 256> response_u8{};
  for (int v = 0; v < 256; ++v) {
    response[v] = weather.brightness_gain * (128.0 + weather.contrast * (v - 128.0));
    response_u8[v] = static_cast<std::uint8_t>(std::clamp(std::lround(response[v]), 0L, 255L));
  }

  // Sensor noise drawn from a seeded table of unit normals.
  std::array<float, 4096> normals{};
  const bool noisy = weather.noise_sigma > 0.0;
  if (noisy) {
    std::mt19937_64 rng(mix64(weather.rng_seed) ^ mix64(frame_index + 0x51ULL));
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : normals) v = static_cast<float>(weather.noise_sigma * nd(rng));
  }
  const std::uint64_t noise_key = mix64(weather.rng_seed * 0x2545F4914F6CDD1DULL + frame_index);

  struct PixelGlare {
    double cx, cy, radius, intensity;
  };
  std::vector<PixelGlare> glare;
  for (const auto& g : weather.glare_blobs) {
    glare.push_back({g.cx * w, g.cy * h, g.radius * w, g.intensity});
  }
  std::vector<double> row_add(static_cast<std::size_t>(w));

  const double cth = std::cos(pose.heading), sth = std::sin(pose.heading);
  struct BoxedShadow {
    const ShadowQuad* quad;
    double x0, y0, x1, y1;
  };
  std::vector<BoxedShadow> shadows;
  for (const auto& q : weather.shadow_polygons) {
    BoxedShadow b{&q, q.corners[0].first, q.corners[0].second, q.corners[0].first, q.corners[0].second};
    for (const auto& [cx, cy] : q.corners) {
      b.x0 = std::min(b.x0, cx), b.x1 = std::max(b.x1, cx);
      b.y0 = std::min(b.y0, cy), b.y1 = std::max(b.y1, cy);
    }
    shadows.push_back(b);
  }
  auto shadow_factor = [&shadows](double px, double py) {
    double att = 1.0;
    for (const auto& b : shadows) {
      if (px < b.x0 || px > b.x1 || py < b.y0 || py > b.y1) continue;
      bool pos = false, neg = false;
      for (int i = 0; i < 4; ++i) {
        const auto [ax, ay] = b.quad->corners[i];
        const auto [bx, by] = b.quad->corners[(i + 1) % 4];
        const double cr = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
        pos |= cr > 0.0;
        neg |= cr < 0.0;
      }
      if (!(pos && neg)) att *= b.quad->attenuation;
    }
    return att;
  };

  const std::uint64_t texture_seed = mix64(weather.rng_seed + 0x7465787475ULL);
  const double horizon = camera_.horizon_row();
  const int line_base = static_cast<int>(std::lround(line_value));
  std::vector<std::array<std::uint8_t, 3>> base(static_cast<std::size_t>(w));

  for (int y = 0; y < h; ++y) {
    std::uint8_t* row = out.frame.row(y);
    std::uint8_t* mrow = out.oracle_mask.row(y);
    const bool ground = y >= first_ground_row_;
    const double fwd = row_forward_[y], range = row_range_[y];
    // Far ground fades to a uniform haze to limit aliasing.
    const bool haze = ground && fwd > 120.0;

    if (!ground) {
      // Sky gradient darkens away from the horizon.
      const double t = std::clamp((horizon - y) / std::max(1.0, horizon), 0.0, 1.0);
      const std::array<std::uint8_t, 3> sky{static_cast<std::uint8_t>(std::lround(140.0 - 40.0 * t)),
                                            static_cast<std::uint8_t>(std::lround(150.0 - 35.0 * t)),
                                            static_cast<std::uint8_t>(std::lround(165.0 - 25.0 * t))};
      std::fill(base.begin(), base.end(), sky);
    } else if (haze) {
      std::fill(base.begin(), base.end(), std::array<std::uint8_t, 3>{105, 105, 105});
    } else {
      // World position is affine in x along a row.
      const double x0_left = -range * column_offset_[0];
      const double step_left = -range * (column_offset_.size() > 1 ? column_offset_[1] - column_offset_[0] : 0.0);
      double wx = pose.x + fwd * cth - x0_left * sth;
      double wy = pose.y + fwd * sth + x0_left * cth;
      const double dwx = -step_left * sth, dwy = step_left * cth;
      for (int x = 0; x < w; ++x, wx += dwx, wy += dwy) {
        const double n = offset_only(wx, wy, half, r);
        const bool line = std::abs(n + lane_w) <= lw2 || std::abs(n) <= lw2 || std::abs(n - lane_w) <= lw2;
        std::array<std::uint8_t, 3> px;
        if (line) {
          mrow[x] = 255;
          px.fill(static_cast<std::uint8_t>(line_base));
        } else {
          bool marker = false;
          for (const auto& b : bands) {
            if (n >= b.n0 && n <= b.n1 && wx >= b.x0 && wx <= b.x1 && wy >= b.y0 && wy <= b.y1) {
              const double s = wrap_s(to_track(track_, wx, wy).s, track_.reference_length());
              marker = marker || (s >= b.s0 && s <= b.s1);
            }
          }
          if (marker) {
            px = {surface::kMarkerR, surface::kMarkerG, surface::kMarkerB};
          } else {
            const auto cx = static_cast<std::uint64_t>(static_cast<std::int64_t>(std::floor(wx * 20.0)));
            const auto cy = static_cast<std::uint64_t>(static_cast<std::int64_t>(std::floor(wy * 20.0)));
            const std::uint64_t hsh = mix64(texture_seed ^ (cx * 0x9E3779B1ULL) ^ (cy << 32));
            px.fill(static_cast<std::uint8_t>(surface::kAsphalt - 10 + static_cast<int>(hsh % 21)));
          }
        }
        if (!shadows.empty()) {
          const double att = shadow_factor(wx, wy);
          if (att != 1.0) {
            for (auto& c : px) c = static_cast<std::uint8_t>(std::lround(c * att));
          }
        }
        base[x] = px;
      }
    }

    bool has_add = noisy;
    std::fill(row_add.begin(), row_add.end(), 0.0);
    for (const auto& g : glare) {
      const double dy = y + 0.5 - g.cy;
      if (std::abs(dy) >= g.radius) continue;
      const double half_chord = std::sqrt(g.radius * g.radius - dy * dy);
      const int xa = std::max(0, static_cast<int>(g.cx - half_chord));
      const int xb = std::min(w - 1, static_cast<int>(g.cx + half_chord) + 1);
      for (int x = xa; x <= xb; ++x) {
        const double d = std::hypot(x + 0.5 - g.cx, dy);
        if (d < g.radius) row_add[x] += g.intensity * (1.0 - d / g.radius);
      }
      has_add = true;
    }

    if (!has_add) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) row[3 * x + c] = response_u8[base[x][c]];
      }
      continue;
    }
    const std::uint64_t row_key = noise_key + static_cast<std::uint64_t>(y) * static_cast<std::uint64_t>(w);
    for (int x = 0; x < w; ++x) {
      double add = row_add[x];
      if (noisy) add += normals[((row_key + static_cast<std::uint64_t>(x)) * 0x9E3779B97F4A7C15ULL) >> 52];
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(response[base[x][c]] + add, 0.0, 255.0);
        row[3 * x + c] = static_cast<std::uint8_t>(v + 0.5);
      }
    }
  }
  return out;
}

RenderedFrame render_camera(const TrackSpec& track, const VehiclePose& pose, const CameraModel& camera,
                            const WeatherCondition& weather, std::uint64_t frame_index) {
  return Renderer(track, camera).render(pose, weather, frame_index);
}

}  // namespace lanekeeper
