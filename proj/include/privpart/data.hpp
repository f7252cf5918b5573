#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "privpart/rng.hpp"
#include "privpart/tensor.hpp"

namespace privpart {

struct Dataset {
  Tensor<float> images;  // [N, H, W], values in [0,1]
  std::vector<int32_t> labels;
  size_t classes = 0;
  std::string source;

  size_t size() const { return images.rank() == 3 ? images.dim(0) : 0; }
  size_t height() const { return images.dim(1); }
  size_t width() const { return images.dim(2); }

  Tensor<float> flat_images() const {
    return images.reshaped({size(), height() * width()});
  }
};

namespace detail {

// [N,H,W] image rows cast to T and viewed with the given per-sample shape.
template <typename T>
Tensor<T> shape_batch(const Tensor<float>& images, const Shape& per_sample) {
  Shape full{images.dim(0)};
  full.insert(full.end(), per_sample.begin(), per_sample.end());
  if (shape_numel(full) != images.size())
    throw ShapeError("batch of " + shape_str(images.shape()) +
                     " cannot feed per-sample shape " + shape_str(per_sample));
  return images.template cast<T>().reshaped(std::move(full));
}

template <typename T>
Tensor<T> image_batch(const Tensor<float>& images) {
  return images.template cast<T>().reshaped(
      {images.dim(0), 1, images.dim(1), images.dim(2)});
}

// Copy of the selected leading-dimension rows, in the given order.
template <typename U>
Tensor<U> take_rows(const Tensor<U>& t, const std::vector<size_t>& rows) {
  const size_t stride = t.size() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = rows.size();
  Tensor<U> out(shape);
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy(t.data() + rows[i] * stride, t.data() + (rows[i] + 1) * stride,
              out.data() + i * stride);
  return out;
}

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return bytes;
}

inline std::vector<uint8_t> gunzip(const std::vector<uint8_t>& in,
                                   const std::string& path) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 16) != Z_OK)
    throw IoError("zlib init failed for " + path);
  std::vector<uint8_t> out;
  std::vector<uint8_t> buf(1 << 16);
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = buf.data();
    zs.avail_out = static_cast<uInt>(buf.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw IoError("corrupt gzip stream in " + path);
    }
    out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
  }
  inflateEnd(&zs);
  return out;
}

// Transparently inflates .gz payloads based on the magic bytes.
inline std::vector<uint8_t> read_maybe_gzip(const std::string& path) {
  std::vector<uint8_t> bytes = read_file_bytes(path);
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b)
    return gunzip(bytes, path);
  return bytes;
}

inline uint32_t be32(const std::vector<uint8_t>& b, size_t off,
                     const std::string& path) {
  if (off + 4 > b.size()) throw IoError("truncated idx header in " + path);
  return (uint32_t(b[off]) << 24) | (uint32_t(b[off + 1]) << 16) |
         (uint32_t(b[off + 2]) << 8) | uint32_t(b[off + 3]);
}

}  // namespace detail

// idx3-ubyte image file: big-endian magic 0x00000803, then count, rows,
// cols, then raw u8 pixels. Pixels land in [0,1] as value/255.
inline Tensor<float> load_idx_images(const std::string& path) {
  const std::vector<uint8_t> b = detail::read_maybe_gzip(path);
  if (detail::be32(b, 0, path) != 0x00000803)
    throw IoError(path + " is not an idx3-ubyte image file");
  const size_t n = detail::be32(b, 4, path);
  const size_t rows = detail::be32(b, 8, path);
  const size_t cols = detail::be32(b, 12, path);
  if (b.size() != 16 + n * rows * cols)
    throw IoError(path + " is truncated: header claims " +
                  std::to_string(n * rows * cols) + " pixels, file has " +
                  std::to_string(b.size() - 16));
  Tensor<float> images({n, rows, cols});
  for (size_t i = 0; i < n * rows * cols; ++i)
    images[i] = static_cast<float>(b[16 + i]) / 255.0f;
  return images;
}

// idx1-ubyte label file: big-endian magic 0x00000801, then count, then u8s.
inline std::vector<int32_t> load_idx_labels(const std::string& path) {
  const std::vector<uint8_t> b = detail::read_maybe_gzip(path);
  if (detail::be32(b, 0, path) != 0x00000801)
    throw IoError(path + " is not an idx1-ubyte label file");
  const size_t n = detail::be32(b, 4, path);
  if (b.size() != 8 + n)
    throw IoError(path + " is truncated: header claims " + std::to_string(n) +
                  " labels, file has " + std::to_string(b.size() - 8));
  std::vector<int32_t> labels(n);
  for (size_t i = 0; i < n; ++i) labels[i] = b[8 + i];
  return labels;
}

namespace detail {

inline std::string pick_existing(const std::string& dir,
                                 const std::string& stem) {
  namespace fs = std::filesystem;
  for (const char* suffix : {"", ".gz"}) {
    const std::string p = dir + "/" + stem + suffix;
    if (fs::exists(p)) return p;
  }
  throw IoError("missing " + stem + "[.gz] under " + dir);
}

}  // namespace detail

// Loads the standard 4-file digit corpus layout from a directory.
inline Dataset load_mnist_dir(const std::string& dir, bool train) {
  const std::string img_stem =
      train ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte";
  const std::string lbl_stem =
      train ? "train-labels-idx3-ubyte" : "t10k-labels-idx3-ubyte";
  // Both historical stem spellings exist in the wild (idx1 for labels).
  std::string lbl_path;
  try {
    lbl_path = detail::pick_existing(
        dir, train ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte");
  } catch (const IoError&) {
    lbl_path = detail::pick_existing(dir, lbl_stem);
  }
  Dataset ds;
  ds.images = load_idx_images(detail::pick_existing(dir, img_stem));
  ds.labels = load_idx_labels(lbl_path);
  if (ds.images.dim(0) != ds.labels.size())
    throw IoError("image/label count mismatch under " + dir);
  ds.classes = 10;
  ds.source = "mnist:" + dir;
  return ds;
}

// Looks for a digit corpus at $PRIVPART_MNIST, then ./data/mnist.
inline std::optional<std::string> find_mnist_dir() {
  namespace fs = std::filesystem;
  if (const char* env = std::getenv("PRIVPART_MNIST"); env && *env)
    if (fs::exists(std::string(env))) return std::string(env);
  if (fs::exists("data/mnist")) return std::string("data/mnist");
  return std::nullopt;
}

// Deterministic class-conditioned corpus: up to five classes are Gaussian
// blobs on a ring, classes 5-9 are soft bars (two horizontal, two vertical,
// one diagonal), all scaled to the requested side. Per-sample position and
// amplitude jitter plus pixel noise keep instances distinct, so
// reconstruction quality is measurable with SSIM. Labels interleave
// 0..classes-1 in sample order, so class counts are exactly uniform.
inline Dataset synthetic_blobs(size_t classes = 2, size_t per_class = 100,
                               size_t side = 28, uint64_t seed = 1) {
  if (classes < 2 || classes > 10)
    throw ConfigError("synthetic_blobs: classes must be in [2,10]");
  if (side < 8) throw ConfigError("synthetic_blobs: side must be >= 8");
  const size_t n = classes * per_class;
  const double s = static_cast<double>(side) / 28.0;
  const size_t blob_kinds = std::min<size_t>(classes, 5);
  Dataset ds;
  ds.images = Tensor<float>({n, side, side});
  ds.labels.resize(n);
  ds.classes = classes;
  ds.source = "synthetic_blobs:seed=" + std::to_string(seed);
  Rng rng = Rng(seed).fork(0x5b0b5);
  for (size_t i = 0; i < n; ++i) {
    const int32_t cls = static_cast<int32_t>(i % classes);
    ds.labels[i] = cls;
    const double jx = (4.0 * rng.uniform() - 2.0) * s;
    const double jy = (4.0 * rng.uniform() - 2.0) * s;
    const double amp = 0.7 + 0.3 * rng.uniform();
    float* img = ds.images.data() + i * side * side;
    for (size_t r = 0; r < side; ++r)
      for (size_t c = 0; c < side; ++c) {
        const double y = static_cast<double>(r);
        const double x = static_cast<double>(c);
        double v = 0.0;
        if (static_cast<size_t>(cls) < blob_kinds) {
          const double ang =
              2.0 * std::numbers::pi * cls / static_cast<double>(blob_kinds);
          const double cx = side / 2.0 + (side / 4.0) * std::cos(ang) + jx;
          const double cy = side / 2.0 + (side / 4.0) * std::sin(ang) + jy;
          const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          const double sb = 2.5 * s;
          v = std::exp(-d2 / (2.0 * sb * sb));
        } else {
          double d = 0.0;
          switch (cls) {
            case 5: d = y - (side / 4.0 + jy); break;
            case 6: d = y - (side * 5.0 / 7.0 + jy); break;
            case 7: d = x - (side / 4.0 + jx); break;
            case 8: d = x - (side * 5.0 / 7.0 + jx); break;
            default: d = (x - y + jx - jy) / std::numbers::sqrt2; break;
          }
          const double sb = 1.5 * s;
          v = std::exp(-d * d / (2.0 * sb * sb));
        }
        v = amp * v + 0.08 * rng.uniform();
        img[r * side + c] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
      }
  }
  return ds;
}

// Gathers rows into a contiguous batch.
inline std::pair<Tensor<float>, std::vector<int32_t>> gather(
    const Dataset& ds, const std::vector<size_t>& idx) {
  const size_t h = ds.height(), w = ds.width();
  Tensor<float> out({idx.size(), h, w});
  std::vector<int32_t> labels(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= ds.size())
      throw Error("gather: index " + std::to_string(idx[i]) + " out of range");
    std::copy(ds.images.data() + idx[i] * h * w,
              ds.images.data() + (idx[i] + 1) * h * w,
              out.data() + i * h * w);
    labels[i] = ds.labels[idx[i]];
  }
  return {std::move(out), std::move(labels)};
}

inline Dataset take(const Dataset& ds, size_t n) {
  if (n >= ds.size()) return ds;
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  auto [images, labels] = gather(ds, idx);
  return Dataset{std::move(images), std::move(labels), ds.classes, ds.source};
}

// Per-class proportional split: train_frac of each class (floor, shuffled
// within class) goes to the first half, the rest to the second, so both
// halves keep the class balance. Original sample order is preserved inside
// each half. Every class needs at least 2 samples, and the test half is
// never empty (train_frac strictly below 1).
inline std::pair<Dataset, Dataset> stratified_split(const Dataset& ds,
                                                    double train_frac,
                                                    uint64_t seed) {
  if (train_frac <= 0.0 || train_frac >= 1.0)
    throw Error("stratified_split: fraction must be in (0,1); 1.0 would leave "
                "an empty test set");
  std::vector<std::vector<size_t>> per_class(ds.classes);
  for (size_t i = 0; i < ds.size(); ++i) {
    const int32_t l = ds.labels[i];
    if (l < 0 || static_cast<size_t>(l) >= ds.classes)
      throw Error("stratified_split: label " + std::to_string(l) +
                  " outside [0," + std::to_string(ds.classes) + ")");
    per_class[l].push_back(i);
  }
  std::vector<bool> in_test(ds.size(), false);
  Rng rng = Rng(seed).fork(0x5717);
  for (size_t cls = 0; cls < per_class.size(); ++cls) {
    auto& members = per_class[cls];
    if (members.size() < 2)
      throw Error("stratified_split: class " + std::to_string(cls) + " has " +
                  std::to_string(members.size()) + " sample(s), needs >= 2");
    Rng class_rng = rng.fork(cls);
    class_rng.shuffle(members);
    const size_t train_n =
        static_cast<size_t>(train_frac * static_cast<double>(members.size()));
    for (size_t i = train_n; i < members.size(); ++i) in_test[members[i]] = true;
  }
  std::vector<size_t> train_idx, test_idx;
  for (size_t i = 0; i < ds.size(); ++i)
    (in_test[i] ? test_idx : train_idx).push_back(i);
  auto [ti, tl] = gather(ds, train_idx);
  auto [vi, vl] = gather(ds, test_idx);
  return {Dataset{std::move(ti), std::move(tl), ds.classes, ds.source},
          Dataset{std::move(vi), std::move(vl), ds.classes, ds.source}};
}

}  // namespace privpart
