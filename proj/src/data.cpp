#include "cmt/data.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace cmt {

namespace {

struct BaseColor {
  double r, g, b;
};

BaseColor class_color(int32_t cls) {
  switch (cls) {
    case kClassRectangle: return {0.85, 0.25, 0.25};
    case kClassCircle: return {0.25, 0.85, 0.25};
    case kClassTriangle: return {0.30, 0.35, 0.90};
    default: return {0.20, 0.20, 0.20};  // background
  }
}

// integer-geometry shape rasterizers
std::vector<uint8_t> raster_rectangle(int64_t H, int64_t W, SplitMix64& rng) {
  const int64_t h = std::max<int64_t>(4, H / 4 + static_cast<int64_t>(rng.next_below(
                                             static_cast<uint64_t>(std::max<int64_t>(1, H / 5)))));
  const int64_t w = std::max<int64_t>(4, W / 4 + static_cast<int64_t>(rng.next_below(
                                             static_cast<uint64_t>(std::max<int64_t>(1, W / 5)))));
  const int64_t i0 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(H - h + 1)));
  const int64_t j0 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(W - w + 1)));
  std::vector<uint8_t> m(static_cast<size_t>(H * W), 0);
  for (int64_t i = i0; i < i0 + h; ++i)
    for (int64_t j = j0; j < j0 + w; ++j) m[static_cast<size_t>(i * W + j)] = 1;
  return m;
}

std::vector<uint8_t> raster_circle(int64_t H, int64_t W, SplitMix64& rng) {
  const int64_t rmin = std::max<int64_t>(3, std::min(H, W) / 8);
  const int64_t rmax = std::max<int64_t>(rmin, std::min(H, W) / 5);
  const int64_t r = rmin + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(rmax - rmin + 1)));
  const int64_t cy = r + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(H - 2 * r)));
  const int64_t cx = r + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(W - 2 * r)));
  std::vector<uint8_t> m(static_cast<size_t>(H * W), 0);
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j)
      if ((i - cy) * (i - cy) + (j - cx) * (j - cx) <= r * r)
        m[static_cast<size_t>(i * W + j)] = 1;
  return m;
}

std::vector<uint8_t> raster_triangle(int64_t H, int64_t W, SplitMix64& rng) {
  const int64_t h = std::max<int64_t>(5, H / 3 + static_cast<int64_t>(rng.next_below(
                                             static_cast<uint64_t>(std::max<int64_t>(1, H / 6)))));
  const int64_t w = std::max<int64_t>(5, W / 3 + static_cast<int64_t>(rng.next_below(
                                             static_cast<uint64_t>(std::max<int64_t>(1, W / 6)))));
  const int64_t i0 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(H - h + 1)));
  const int64_t j0 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(W - w + 1)));
  // apex at the top middle, base along the bottom edge of the box
  const int64_t ax = j0 + w / 2, ay = i0;
  const int64_t bx = j0, by = i0 + h - 1;
  const int64_t cx = j0 + w - 1, cy = i0 + h - 1;
  auto cross = [](int64_t ox, int64_t oy, int64_t px, int64_t py, int64_t qx, int64_t qy) {
    return (px - ox) * (qy - oy) - (py - oy) * (qx - ox);
  };
  std::vector<uint8_t> m(static_cast<size_t>(H * W), 0);
  for (int64_t i = i0; i < i0 + h; ++i)
    for (int64_t j = j0; j < j0 + w; ++j) {
      const int64_t d1 = cross(ax, ay, bx, by, j, i);
      const int64_t d2 = cross(bx, by, cx, cy, j, i);
      const int64_t d3 = cross(cx, cy, ax, ay, j, i);
      const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
      const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
      if (!(neg && pos)) m[static_cast<size_t>(i * W + j)] = 1;
    }
  return m;
}

}  // namespace

Sample generate_scene(uint64_t rng_seed, const GenConfig& config) {
  if (config.H < 16 || config.W < 16)
    throw std::invalid_argument("generate_scene: size must be at least 16x16");
  if (config.max_shapes < 1 || config.max_shapes > 8)
    throw std::invalid_argument("generate_scene: max_shapes must be in [1,8]");
  std::vector<int32_t> kinds;
  if (config.shape_kinds & 1) kinds.push_back(kClassRectangle);
  if (config.shape_kinds & 2) kinds.push_back(kClassCircle);
  if (config.shape_kinds & 4) kinds.push_back(kClassTriangle);
  if (kinds.empty()) throw std::invalid_argument("generate_scene: no shape kinds enabled");

  SplitMix64 rng(rng_seed);
  const int64_t H = config.H, W = config.W;
  const int64_t want = 1 + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(config.max_shapes)));

  Sample s;
  s.H = H;
  s.W = W;
  s.target.H = H;
  s.target.W = W;
  std::vector<uint8_t> occupied(static_cast<size_t>(H * W), 0);
  for (int64_t k = 0; k < want; ++k) {
    const int32_t cls = kinds[rng.next_below(kinds.size())];
    for (int attempt = 0; attempt < 100; ++attempt) {
      std::vector<uint8_t> m;
      switch (cls) {
        case kClassRectangle: m = raster_rectangle(H, W, rng); break;
        case kClassCircle: m = raster_circle(H, W, rng); break;
        default: m = raster_triangle(H, W, rng); break;
      }
      bool clash = false;
      for (size_t x = 0; x < m.size() && !clash; ++x)
        if (m[x] && occupied[x]) clash = true;
      if (clash) continue;
      for (size_t x = 0; x < m.size(); ++x)
        if (m[x]) occupied[x] = 1;
      s.target.masks.push_back(std::move(m));
      s.target.classes.push_back(cls);
      break;
    }
  }
  if (s.target.masks.empty())
    throw GenerationError("generate_scene: could not place any shape");

  s.image = Array(Shape{H * W, 3});
  std::vector<int32_t> pixel_class(static_cast<size_t>(H * W), kClassBackground);
  for (int64_t k = 0; k < s.target.K(); ++k)
    for (size_t x = 0; x < s.target.masks[static_cast<size_t>(k)].size(); ++x)
      if (s.target.masks[static_cast<size_t>(k)][x])
        pixel_class[x] = s.target.classes[static_cast<size_t>(k)];
  for (int64_t x = 0; x < H * W; ++x) {
    const BaseColor c = class_color(pixel_class[static_cast<size_t>(x)]);
    const double ch[3] = {c.r, c.g, c.b};
    for (int64_t j = 0; j < 3; ++j) {
      double v = ch[j] + 0.2 * rng.next_double() - 0.1;
      v = std::clamp(v, 0.0, 1.0);
      // quantize to f32 so disk round trips are bit-exact in memory too
      s.image.at(x, j) = static_cast<double>(static_cast<float>(v));
    }
  }
  return s;
}

PanopticTarget downsample_target(const PanopticTarget& t, int64_t factor) {
  PanopticTarget out;
  out.H = t.H / factor;
  out.W = t.W / factor;
  for (int64_t k = 0; k < t.K(); ++k) {
    std::vector<uint8_t> m(static_cast<size_t>(out.H * out.W), 0);
    bool any = false;
    for (int64_t i = 0; i < out.H; ++i)
      for (int64_t j = 0; j < out.W; ++j) {
        const int64_t si = i * factor + factor / 2;
        const int64_t sj = j * factor + factor / 2;
        if (t.masks[static_cast<size_t>(k)][static_cast<size_t>(si * t.W + sj)]) {
          m[static_cast<size_t>(i * out.W + j)] = 1;
          any = true;
        }
      }
    if (any) {
      out.masks.push_back(std::move(m));
      out.classes.push_back(t.classes[static_cast<size_t>(k)]);
    }
  }
  return out;
}

// ---- binary IO ----

namespace {

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot open for writing: " + path);
  }
  void u8(uint8_t v) { raw(&v, 1); }
  void u16(uint16_t v) { raw(&v, 2); }
  void u32(uint32_t v) { raw(&v, 4); }
  void f32(float v) { raw(&v, 4); }
  void bytes(const void* p, size_t n) { raw(p, n); }
  void close() {
    out_.close();
    if (!out_) throw std::runtime_error("write failure on close");
  }

 private:
  void raw(const void* p, size_t n) {
    static_assert(std::endian::native == std::endian::little);
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw std::runtime_error("write failure");
  }
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("cannot open for reading: " + path);
  }
  uint8_t u8() { uint8_t v; raw(&v, 1); return v; }
  uint16_t u16() { uint16_t v; raw(&v, 2); return v; }
  uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
  float f32() { float v; raw(&v, 4); return v; }
  void bytes(void* p, size_t n) { raw(p, n); }
  uint64_t offset() const { return offset_; }

 private:
  void raw(void* p, size_t n) {
    static_assert(std::endian::native == std::endian::little);
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n)
      throw FormatError("truncated file", offset_);
    offset_ += n;
  }
  std::ifstream in_;
  uint64_t offset_ = 0;
};

constexpr char kDatasetMagic[4] = {'C', 'M', 'T', 'D'};

}  // namespace

void write_dataset(const std::string& path, const std::vector<Sample>& samples) {
  Writer w(path);
  w.bytes(kDatasetMagic, 4);
  w.u32(1);
  w.u32(static_cast<uint32_t>(samples.size()));
  w.u16(kNumClasses);
  w.u16(kThingClassMask);
  for (const Sample& s : samples) {
    w.u32(static_cast<uint32_t>(s.H));
    w.u32(static_cast<uint32_t>(s.W));
    for (double v : s.image.data) w.f32(static_cast<float>(v));
    w.u32(static_cast<uint32_t>(s.target.K()));
    for (int64_t k = 0; k < s.target.K(); ++k) {
      w.u32(static_cast<uint32_t>(s.target.classes[static_cast<size_t>(k)]));
      w.bytes(s.target.masks[static_cast<size_t>(k)].data(), s.target.masks[static_cast<size_t>(k)].size());
    }
  }
  w.close();
}

std::vector<Sample> read_dataset(const std::string& path, DatasetHeader* header) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kDatasetMagic, 4) != 0)
    throw FormatError("bad magic, expected \"CMTD\"", 0);
  DatasetHeader h;
  h.version = r.u32();
  if (h.version != 1) throw FormatError("unsupported version " + std::to_string(h.version), 4);
  h.sample_count = r.u32();
  h.class_count = r.u16();
  h.thing_class_mask = r.u16();
  std::vector<Sample> samples;
  samples.reserve(h.sample_count);
  for (uint32_t i = 0; i < h.sample_count; ++i) {
    Sample s;
    s.H = r.u32();
    s.W = r.u32();
    s.image = Array(Shape{s.H * s.W, 3});
    for (double& v : s.image.data) v = static_cast<double>(r.f32());
    s.target.H = s.H;
    s.target.W = s.W;
    const uint32_t K = r.u32();
    for (uint32_t k = 0; k < K; ++k) {
      s.target.classes.push_back(static_cast<int32_t>(r.u32()));
      std::vector<uint8_t> m(static_cast<size_t>(s.H * s.W));
      r.bytes(m.data(), m.size());
      s.target.masks.push_back(std::move(m));
    }
    samples.push_back(std::move(s));
  }
  if (header) *header = h;
  return samples;
}

void write_panoptic_map(const std::string& path, const PanopticMap& map) {
  Writer w(path);
  w.u32(static_cast<uint32_t>(map.H));
  w.u32(static_cast<uint32_t>(map.W));
  w.u32(static_cast<uint32_t>(map.segments.size()));
  for (const auto& [id, cls] : map.segments) {
    w.u32(static_cast<uint32_t>(id));
    w.u32(static_cast<uint32_t>(cls));
    std::vector<uint8_t> m(map.segment_id.size());
    for (size_t x = 0; x < m.size(); ++x) m[x] = map.segment_id[x] == id ? 1 : 0;
    w.bytes(m.data(), m.size());
  }
  w.close();
}

PanopticMap read_panoptic_map(const std::string& path) {
  Reader r(path);
  PanopticMap map;
  map.H = r.u32();
  map.W = r.u32();
  map.segment_id.assign(static_cast<size_t>(map.H * map.W), 0);
  const uint32_t S = r.u32();
  for (uint32_t s = 0; s < S; ++s) {
    const int32_t id = static_cast<int32_t>(r.u32());
    const int32_t cls = static_cast<int32_t>(r.u32());
    map.segments.emplace_back(id, cls);
    std::vector<uint8_t> m(map.segment_id.size());
    r.bytes(m.data(), m.size());
    for (size_t x = 0; x < m.size(); ++x)
      if (m[x]) map.segment_id[x] = id;
  }
  return map;
}

std::set<int32_t> thing_classes_from_mask(uint16_t mask) {
  std::set<int32_t> out;
  for (int32_t c = 0; c < 16; ++c)
    if (mask & (1u << c)) out.insert(c);
  return out;
}

}  // namespace cmt
