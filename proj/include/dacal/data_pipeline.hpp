#pragma once

#include <cctype>
#include <filesystem>
#include <iostream>

#include "dacal/image_io.hpp"
#include "dacal/image_ops.hpp"

// Dataset ingestion: paired low/high directories, unpaired domain_x/domain_y
// directories, and clips/<id>/frame_%04d.png video layouts, with
// deterministic per-epoch shuffling and batching.

namespace dacal {

namespace fs = std::filesystem;

struct ManifestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class DataMode { kPaired, kUnpaired, kVideo };

inline std::string to_string(DataMode m) {
  switch (m) {
    case DataMode::kPaired: return "paired";
    case DataMode::kUnpaired: return "unpaired";
    case DataMode::kVideo: return "video";
  }
  return "?";
}

struct ClipEntry {
  std::string id;
  std::vector<std::string> frames;  // lexicographically ordered paths
};

struct DatasetManifest {
  DataMode mode = DataMode::kPaired;
  // paired: entries_x[i] and entries_y[i] carry matching filenames.
  // unpaired: the two lists are independent.
  std::vector<std::string> entries_x, entries_y;
  std::vector<ClipEntry> clips_x, clips_y;  // video mode
  int64_t target_h = 32, target_w = 64;
};

namespace detail {

inline bool is_image_file(const fs::path& p) {
  std::string e = p.extension().string();
  for (char& c : e) c = static_cast<char>(std::tolower(c));
  return e == ".png" || e == ".jpg" || e == ".jpeg";
}

inline std::vector<std::string> list_images(const std::string& dir) {
  if (!fs::is_directory(dir)) throw ManifestError("not a directory: " + dir);
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && is_image_file(entry.path()))
      names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw ManifestError("no images found in " + dir);
  return names;
}

inline std::vector<ClipEntry> list_clips(const std::string& dir) {
  if (!fs::is_directory(dir)) throw ManifestError("not a directory: " + dir);
  std::vector<ClipEntry> clips;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_directory()) continue;
    ClipEntry clip;
    clip.id = entry.path().filename().string();
    for (const auto& f : fs::directory_iterator(entry.path()))
      if (f.is_regular_file() && is_image_file(f.path())) clip.frames.push_back(f.path().string());
    std::sort(clip.frames.begin(), clip.frames.end());
    if (!clip.frames.empty()) clips.push_back(std::move(clip));
  }
  std::sort(clips.begin(), clips.end(),
            [](const ClipEntry& a, const ClipEntry& b) { return a.id < b.id; });
  if (clips.empty()) throw ManifestError("no clips found in " + dir);
  return clips;
}

}  // namespace detail

/// Validates directory structure; paired mismatches report the orphans.
inline DatasetManifest scan_manifest(DataMode mode, const std::string& dir_x,
                                     const std::string& dir_y, int64_t target_h,
                                     int64_t target_w) {
  DatasetManifest m;
  m.mode = mode;
  m.target_h = target_h;
  m.target_w = target_w;
  if (mode == DataMode::kVideo) {
    m.clips_x = detail::list_clips(dir_x);
    m.clips_y = detail::list_clips(dir_y);
    return m;
  }
  m.entries_x = detail::list_images(dir_x);
  m.entries_y = detail::list_images(dir_y);
  if (mode == DataMode::kPaired) {
    std::vector<std::string> orphans;
    std::set_symmetric_difference(m.entries_x.begin(), m.entries_x.end(), m.entries_y.begin(),
                                  m.entries_y.end(), std::back_inserter(orphans));
    if (!orphans.empty()) {
      std::string msg = "paired manifest mismatch, orphans:";
      for (const std::string& o : orphans) msg += " " + o;
      throw ManifestError(msg);
    }
  }
  return m;
}

/// Loaded dataset: every image resized to the manifest target resolution and
/// guaranteed to satisfy the unit-interval invariants.
struct LoadedDataset {
  DataMode mode;
  std::vector<Tensor> x, y;                      // paired/unpaired
  std::vector<std::vector<Tensor>> clips_x, clips_y;  // video
};

namespace detail {

inline Tensor load_resized(const std::string& path, int64_t h, int64_t w) {
  Tensor img = read_image(path);
  return resize(img, h, w, ResizeMode::kBilinear);
}

template <typename Out>
void load_list(const std::vector<std::string>& names, const std::string& dir, int64_t h, int64_t w,
               Out& out) {
  for (const std::string& name : names) {
    std::string path = dir.empty() ? name : dir + "/" + name;
    try {
      out.push_back(load_resized(path, h, w));
    } catch (const IoError& e) {
      // decode failures skip with a warning rather than aborting the run
      std::cerr << "[data] skipping " << path << ": " << e.what() << "\n";
    }
  }
  if (out.empty()) throw DataError("all images failed to decode");
}

}  // namespace detail

inline LoadedDataset load_dataset(const DatasetManifest& m, const std::string& dir_x,
                                  const std::string& dir_y) {
  LoadedDataset out;
  out.mode = m.mode;
  if (m.mode == DataMode::kVideo) {
    for (const ClipEntry& c : m.clips_x) {
      std::vector<Tensor> frames;
      detail::load_list(c.frames, "", m.target_h, m.target_w, frames);
      out.clips_x.push_back(std::move(frames));
    }
    for (const ClipEntry& c : m.clips_y) {
      std::vector<Tensor> frames;
      detail::load_list(c.frames, "", m.target_h, m.target_w, frames);
      out.clips_y.push_back(std::move(frames));
    }
    return out;
  }
  detail::load_list(m.entries_x, dir_x, m.target_h, m.target_w, out.x);
  detail::load_list(m.entries_y, dir_y, m.target_h, m.target_w, out.y);
  return out;
}

/// Deterministic index batches for one epoch: shuffle by (seed, epoch), keep
/// the partial final batch.
inline std::vector<std::vector<int64_t>> make_batches(int64_t n_items, int64_t batch_size,
                                                      uint64_t seed, int64_t epoch) {
  if (batch_size < 1) throw std::invalid_argument("make_batches: batch_size must be >= 1");
  if (n_items < 1) throw std::invalid_argument("make_batches: empty dataset");
  std::vector<int64_t> idx(n_items);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ull * static_cast<uint64_t>(epoch + 1)));
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<int64_t>> batches;
  for (int64_t start = 0; start < n_items; start += batch_size) {
    int64_t end = std::min(n_items, start + batch_size);
    batches.emplace_back(idx.begin() + start, idx.begin() + end);
  }
  return batches;
}

/// Stacks HWC images into an NHWC batch; shapes must be uniform.
inline Tensor stack_images(const std::vector<Tensor>& images, const std::vector<int64_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("stack_images: empty batch");
  const Tensor& first = images.at(indices[0]);
  Tensor out({static_cast<int64_t>(indices.size()), first.dim(0), first.dim(1), first.dim(2)});
  int64_t stride = first.numel();
  for (size_t i = 0; i < indices.size(); ++i) {
    const Tensor& img = images.at(indices[i]);
    if (!img.same_shape(first)) throw ShapeError("stack_images: non-uniform image shapes");
    std::copy(img.data(), img.data() + stride, out.data() + i * stride);
  }
  return out;
}

/// Centered frame windows over a clip with replicated boundaries:
/// a w-window for every frame position.
inline std::vector<std::vector<int64_t>> clip_windows(int64_t n_frames, int64_t window) {
  if (n_frames < 1) throw DataError("clip_windows: empty clip");
  std::vector<std::vector<int64_t>> out;
  int64_t half = window / 2;
  for (int64_t t = 0; t < n_frames; ++t) {
    std::vector<int64_t> w;
    for (int64_t d = -half; d <= half; ++d)
      w.push_back(std::clamp<int64_t>(t + d, 0, n_frames - 1));
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace dacal
