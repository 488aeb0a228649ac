#pragma once

#include <torch/torch.h>

#include <opencv2/core.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "tbtnet/common.hpp"

namespace tbtnet {

enum class DatasetKind { pascal, coco, synthetic };
enum class Partition { train, test };

std::string to_string(DatasetKind kind);
std::string to_string(Partition partition);
DatasetKind parse_dataset_kind(const std::string& name);

/// Number of foreground classes (class ids are 0..n-1).
int class_count(DatasetKind kind);

struct FoldSplit {
  DatasetKind dataset = DatasetKind::pascal;
  int fold = 0;
  std::vector<int> train_classes;  // ascending
  std::vector<int> test_classes;   // ascending

  const std::vector<int>& classes(Partition p) const { return p == Partition::train ? train_classes : test_classes; }
  bool contains(Partition p, int class_id) const;
};

/// Test classes are the contiguous block {n*fold, ..., n*fold + n - 1} with
/// n = 5 (pascal), 20 (coco) or 1 (synthetic); the rest are training classes.
FoldSplit build_fold_split(DatasetKind dataset, int fold);

struct ImageRecord {
  std::string image;         // relative to the dataset root
  std::string mask;          // relative label map; empty for coco
  std::vector<int> classes;  // class ids present, ascending
};

/// Images of one partition and the classes they contain.
///
/// pascal / synthetic (VOC layout):
///   JPEGImages/<id>.jpg|.png, SegmentationClassAug/<id>.png (or SegmentationClass),
///   ImageSets/Segmentation/{trainaug,train,val}.txt. Label value v > 0 is class v - 1,
///   0 and 255 are background.
/// coco:
///   annotations/instances_{train,val}2014.json, {train,val}2014/<file_name>.
///   Category ids in ascending order map to class ids 0..79.
class DatasetIndex {
 public:
  static DatasetIndex open(DatasetKind kind, const std::filesystem::path& root, Partition partition);

  DatasetKind kind() const { return kind_; }
  Partition partition() const { return partition_; }
  const std::filesystem::path& root() const { return root_; }
  const std::vector<ImageRecord>& records() const { return records_; }
  const std::vector<size_t>& images_with_class(int class_id) const;
  /// Record position of a relative image path, or -1.
  int64_t find(const std::string& image) const;

  cv::Mat load_image(size_t record) const;
  /// 8-bit map at the image's native resolution, 1 on pixels of `class_id`.
  cv::Mat class_mask(size_t record, int class_id) const;

 private:
  struct CocoObject {
    int class_id = 0;
    std::vector<std::vector<double>> polygons;
    std::vector<uint32_t> rle;  // column-major run lengths, starting with background
  };
  struct CocoImage {
    int height = 0;
    int width = 0;
    std::vector<CocoObject> objects;
  };

  void finalize();

  DatasetKind kind_ = DatasetKind::pascal;
  Partition partition_ = Partition::train;
  std::filesystem::path root_;
  std::vector<ImageRecord> records_;
  std::vector<CocoImage> coco_;
  std::vector<std::vector<size_t>> by_class_;
  std::map<std::string, size_t> position_;
};

/// Decodes the compressed COCO run-length string into run lengths.
std::vector<uint32_t> decode_coco_rle(const std::string& counts);

/// Unbiased draw from {0, ..., n-1} using only the raw 64-bit engine output,
/// so sequences are identical across standard libraries.
uint64_t uniform_index(std::mt19937_64& rng, uint64_t n);
/// Uniform double in [0, 1) from the top 53 bits of one engine output.
double uniform_unit(std::mt19937_64& rng);

struct EpisodeDescriptor {
  std::string query;
  std::vector<std::string> supports;
  int class_id = 0;
  size_t line = 0;  // manifest line, 0 when not read from a file

  bool operator==(const EpisodeDescriptor& o) const {
    return query == o.query && supports == o.supports && class_id == o.class_id;
  }
};

struct Episode {
  torch::Tensor query_image;                 // [3,S,S] in [0,1]
  torch::Tensor query_mask;                  // [S,S], 0/1
  std::vector<torch::Tensor> support_images;
  std::vector<torch::Tensor> support_masks;
  int class_id = 0;
  EpisodeDescriptor descriptor;

  int shots() const { return static_cast<int>(support_images.size()); }
};

struct SamplerOptions {
  int shots = 1;
  int64_t image_size = 400;
  int max_retries = 100;
};

/// Draws episodes of one partition: a class uniformly among those with at
/// least K+1 images, then K+1 distinct images of that class.
class EpisodeSampler {
 public:
  EpisodeSampler(std::shared_ptr<const DatasetIndex> index, FoldSplit split, Partition partition,
                 SamplerOptions options = {});

  /// Class and image choice only; no file access.
  EpisodeDescriptor draw(std::mt19937_64& rng) const;
  /// Reads and resizes the images of a descriptor. Throws ConfigError when the
  /// class is outside the partition and LoadError for unknown or unreadable files.
  Episode load(const EpisodeDescriptor& descriptor) const;
  /// draw + load, redrawing when a resized mask has no pixel of the class.
  Episode sample(std::mt19937_64& rng) const;

  const FoldSplit& split() const { return split_; }
  Partition partition() const { return partition_; }
  const SamplerOptions& options() const { return options_; }
  const std::vector<int>& usable_classes() const { return usable_; }
  const DatasetIndex& index() const { return *index_; }

 private:
  std::shared_ptr<const DatasetIndex> index_;
  FoldSplit split_;
  Partition partition_;
  SamplerOptions options_;
  std::vector<int> usable_;
};

/// `n` episodes sampled from a generator seeded with `seed`.
std::vector<EpisodeDescriptor> test_pair_list(const EpisodeSampler& sampler, uint64_t seed, int n = 1000);

struct Manifest {
  std::map<std::string, std::string> meta;
  std::vector<EpisodeDescriptor> entries;
};

/// One line per episode: query \t support;support;... \t class id.
/// `meta` goes into a leading "#" line as key=value pairs.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

struct SyntheticOptions {
  int classes = 4;
  int images_per_class = 12;
  int image_size = 64;
  double distractor_rate = 0.5;
  uint64_t seed = 0;
};

/// Writes a VOC-layout dataset of filled shapes on noise. The shape type and
/// hue encode the class; every image has one object of its primary class and
/// possibly a second object of another class. Images alternate between the
/// train and val lists.
void generate_synthetic_dataset(const std::filesystem::path& root, const SyntheticOptions& options);

}  // namespace tbtnet
