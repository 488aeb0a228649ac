#include "tbtnet/episodes.hpp"

#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "tbtnet/image_io.hpp"

namespace tbtnet {

namespace fs = std::filesystem;

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::pascal: return "pascal";
    case DatasetKind::coco: return "coco";
    case DatasetKind::synthetic: return "synthetic";
  }
  return "unknown";
}

std::string to_string(Partition partition) { return partition == Partition::train ? "train" : "test"; }

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "pascal" || name == "pascal-5i") return DatasetKind::pascal;
  if (name == "coco" || name == "coco-20i") return DatasetKind::coco;
  if (name == "synthetic") return DatasetKind::synthetic;
  throw ConfigError("unknown dataset '" + name + "' (expected pascal, coco or synthetic)");
}

int class_count(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::pascal: return 20;
    case DatasetKind::coco: return 80;
    case DatasetKind::synthetic: return 4;
  }
  return 0;
}

bool FoldSplit::contains(Partition p, int class_id) const {
  const auto& c = classes(p);
  return std::binary_search(c.begin(), c.end(), class_id);
}

FoldSplit build_fold_split(DatasetKind dataset, int fold) {
  if (fold < 0 || fold > 3) throw ConfigError("fold must be in 0..3, got " + std::to_string(fold));
  const int total = class_count(dataset);
  const int per_fold = total / 4;
  FoldSplit split;
  split.dataset = dataset;
  split.fold = fold;
  for (int c = 0; c < total; ++c) {
    if (c >= per_fold * fold && c < per_fold * (fold + 1)) {
      split.test_classes.push_back(c);
    } else {
      split.train_classes.push_back(c);
    }
  }
  return split;
}

// ---------------------------------------------------------------------------
// Dataset index

namespace {

std::vector<std::string> read_list(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read image list " + path.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    auto end = line.find_last_not_of(" \t\r");
    if (end == std::string::npos) continue;
    line.resize(end + 1);
    // Some lists carry "<image> <mask>" pairs; the first token is the id.
    auto first = line.substr(0, line.find_first_of(" \t"));
    ids.push_back(fs::path(first).stem().string());
  }
  return ids;
}

std::vector<int> classes_in_label_map(const cv::Mat& labels, int classes) {
  std::vector<bool> seen(256, false);
  for (int y = 0; y < labels.rows; ++y) {
    const uint8_t* row = labels.ptr<uint8_t>(y);
    for (int x = 0; x < labels.cols; ++x) seen[row[x]] = true;
  }
  std::vector<int> out;
  for (int v = 1; v <= classes; ++v) {
    if (seen[static_cast<size_t>(v)]) out.push_back(v - 1);
  }
  return out;
}

}  // namespace

DatasetIndex DatasetIndex::open(DatasetKind kind, const fs::path& root, Partition partition) {
  DatasetIndex index;
  index.kind_ = kind;
  index.partition_ = partition;
  index.root_ = root;
  if (!fs::is_directory(root)) throw LoadError("dataset root does not exist: " + root.string());

  if (kind == DatasetKind::coco) {
    const std::string split = partition == Partition::train ? "train2014" : "val2014";
    const fs::path ann = root / "annotations" / ("instances_" + split + ".json");
    std::ifstream in(ann);
    if (!in) throw LoadError("cannot read annotations " + ann.string());
    nlohmann::json doc;
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("malformed annotations " + ann.string() + ": " + e.what());
    }
    std::vector<int64_t> category_ids;
    for (const auto& c : doc.at("categories")) category_ids.push_back(c.at("id").get<int64_t>());
    std::sort(category_ids.begin(), category_ids.end());
    if (static_cast<int>(category_ids.size()) != class_count(kind)) {
      throw LoadError(ann.string() + " lists " + std::to_string(category_ids.size()) + " categories, expected 80");
    }
    std::map<int64_t, size_t> image_pos;
    for (const auto& im : doc.at("images")) {
      image_pos[im.at("id").get<int64_t>()] = index.records_.size();
      index.records_.push_back({split + "/" + im.at("file_name").get<std::string>(), "", {}});
      index.coco_.push_back({im.at("height").get<int>(), im.at("width").get<int>(), {}});
    }
    for (const auto& a : doc.at("annotations")) {
      auto it = image_pos.find(a.at("image_id").get<int64_t>());
      if (it == image_pos.end()) continue;
      CocoObject obj;
      const auto category = a.at("category_id").get<int64_t>();
      auto cat = std::lower_bound(category_ids.begin(), category_ids.end(), category);
      if (cat == category_ids.end() || *cat != category) continue;
      obj.class_id = static_cast<int>(cat - category_ids.begin());
      const auto& seg = a.at("segmentation");
      if (seg.is_array()) {
        for (const auto& poly : seg) obj.polygons.push_back(poly.get<std::vector<double>>());
      } else {
        const auto& counts = seg.at("counts");
        obj.rle = counts.is_string() ? decode_coco_rle(counts.get<std::string>()) : counts.get<std::vector<uint32_t>>();
      }
      index.coco_[it->second].objects.push_back(std::move(obj));
      index.records_[it->second].classes.push_back(index.coco_[it->second].objects.back().class_id);
    }
    for (auto& r : index.records_) {
      std::sort(r.classes.begin(), r.classes.end());
      r.classes.erase(std::unique(r.classes.begin(), r.classes.end()), r.classes.end());
    }
  } else {
    const fs::path sets = root / "ImageSets" / "Segmentation";
    fs::path list = sets / (partition == Partition::train ? "train.txt" : "val.txt");
    if (partition == Partition::train && fs::exists(sets / "trainaug.txt")) list = sets / "trainaug.txt";
    const std::string mask_dir = fs::is_directory(root / "SegmentationClassAug") ? "SegmentationClassAug"
                                                                                  : "SegmentationClass";
    const int classes = kind == DatasetKind::synthetic ? class_count(kind) : 20;
    for (const auto& id : read_list(list)) {
      ImageRecord rec;
      for (const char* ext : {".jpg", ".png", ".jpeg"}) {
        if (fs::exists(root / "JPEGImages" / (id + ext))) {
          rec.image = "JPEGImages/" + id + ext;
          break;
        }
      }
      if (rec.image.empty()) throw LoadError("no image for '" + id + "' under " + (root / "JPEGImages").string());
      rec.mask = mask_dir + "/" + id + ".png";
      rec.classes = classes_in_label_map(read_label_map(root / rec.mask), classes);
      index.records_.push_back(std::move(rec));
    }
  }
  index.finalize();
  return index;
}

void DatasetIndex::finalize() {
  by_class_.assign(static_cast<size_t>(class_count(kind_)), {});
  position_.clear();
  for (size_t i = 0; i < records_.size(); ++i) {
    position_[records_[i].image] = i;
    for (int c : records_[i].classes) by_class_[static_cast<size_t>(c)].push_back(i);
  }
}

const std::vector<size_t>& DatasetIndex::images_with_class(int class_id) const {
  if (class_id < 0 || class_id >= static_cast<int>(by_class_.size())) {
    throw ConfigError("class id " + std::to_string(class_id) + " out of range");
  }
  return by_class_[static_cast<size_t>(class_id)];
}

int64_t DatasetIndex::find(const std::string& image) const {
  auto it = position_.find(image);
  return it == position_.end() ? -1 : static_cast<int64_t>(it->second);
}

cv::Mat DatasetIndex::load_image(size_t record) const { return read_rgb(root_ / records_.at(record).image); }

cv::Mat DatasetIndex::class_mask(size_t record, int class_id) const {
  const auto& rec = records_.at(record);
  if (kind_ != DatasetKind::coco) {
    cv::Mat labels = read_label_map(root_ / rec.mask);
    cv::Mat mask = labels == (class_id + 1);
    return mask / 255;
  }
  const auto& im = coco_.at(record);
  cv::Mat mask = cv::Mat::zeros(im.height, im.width, CV_8UC1);
  constexpr int kShift = 8;
  for (const auto& obj : im.objects) {
    if (obj.class_id != class_id) continue;
    for (const auto& poly : obj.polygons) {
      std::vector<cv::Point> pts;
      for (size_t k = 0; k + 1 < poly.size(); k += 2) {
        pts.emplace_back(static_cast<int>(std::lround(poly[k] * (1 << kShift))),
                         static_cast<int>(std::lround(poly[k + 1] * (1 << kShift))));
      }
      if (pts.size() >= 3) cv::fillPoly(mask, std::vector<std::vector<cv::Point>>{pts}, cv::Scalar(1), cv::LINE_8, kShift);
    }
    if (!obj.rle.empty()) {
      const int64_t total = static_cast<int64_t>(im.height) * im.width;
      int64_t pos = 0;
      bool on = false;
      for (uint32_t run : obj.rle) {
        if (on) {
          for (int64_t p = pos; p < std::min<int64_t>(pos + run, total); ++p) {
            mask.at<uint8_t>(static_cast<int>(p % im.height), static_cast<int>(p / im.height)) = 1;
          }
        }
        pos += run;
        on = !on;
      }
    }
  }
  return mask;
}

std::vector<uint32_t> decode_coco_rle(const std::string& counts) {
  std::vector<int64_t> runs;
  size_t p = 0;
  while (p < counts.size()) {
    int64_t x = 0;
    int k = 0;
    bool more = true;
    while (more) {
      if (p >= counts.size()) throw LoadError("truncated RLE string");
      const int64_t c = static_cast<int64_t>(counts[p]) - 48;
      x |= (c & 0x1f) << (5 * k);
      more = (c & 0x20) != 0;
      ++p;
      ++k;
      if (!more && (c & 0x10)) x |= ~int64_t{0} << (5 * k);
    }
    if (runs.size() > 2) x += runs[runs.size() - 2];
    runs.push_back(x);
  }
  std::vector<uint32_t> out;
  out.reserve(runs.size());
  for (auto r : runs) {
    if (r < 0) throw LoadError("negative run in RLE string");
    out.push_back(static_cast<uint32_t>(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

uint64_t uniform_index(std::mt19937_64& rng, uint64_t n) {
  if (n == 0) throw ConfigError("uniform_index over an empty range");
  // Largest multiple of n representable in [0, 2^64).
  const uint64_t limit = std::numeric_limits<uint64_t>::max() - (std::numeric_limits<uint64_t>::max() % n + 1) % n;
  uint64_t x;
  do {
    x = rng();
  } while (x > limit);
  return x % n;
}

double uniform_unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

EpisodeSampler::EpisodeSampler(std::shared_ptr<const DatasetIndex> index, FoldSplit split, Partition partition,
                               SamplerOptions options)
    : index_(std::move(index)), split_(std::move(split)), partition_(partition), options_(options) {
  if (!index_) throw ConfigError("sampler needs a dataset index");
  if (options_.shots < 1) throw ConfigError("shots must be at least 1");
  if (options_.image_size <= 0) throw ConfigError("image size must be positive");
  if (options_.max_retries < 1) throw ConfigError("max_retries must be at least 1");
  if (index_->partition() != partition_) {
    throw ConfigError("dataset index holds the " + to_string(index_->partition()) + " images, sampler wants " +
                      to_string(partition_));
  }
  for (int c : split_.classes(partition_)) {
    if (index_->images_with_class(c).size() >= static_cast<size_t>(options_.shots + 1)) usable_.push_back(c);
  }
  if (usable_.empty()) {
    throw SamplingError("no " + to_string(partition_) + " class of fold " + std::to_string(split_.fold) + " has " +
                        std::to_string(options_.shots + 1) + " images");
  }
}

EpisodeDescriptor EpisodeSampler::draw(std::mt19937_64& rng) const {
  EpisodeDescriptor d;
  d.class_id = usable_[uniform_index(rng, usable_.size())];
  std::vector<size_t> pool = index_->images_with_class(d.class_id);
  const auto picks = static_cast<size_t>(options_.shots + 1);
  for (size_t i = 0; i < picks; ++i) {
    std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
  }
  const auto& records = index_->records();
  d.query = records[pool[0]].image;
  for (size_t i = 1; i < picks; ++i) d.supports.push_back(records[pool[i]].image);
  return d;
}

Episode EpisodeSampler::load(const EpisodeDescriptor& d) const {
  const std::string where = d.line > 0 ? "manifest line " + std::to_string(d.line) + ": " : "";
  if (!split_.contains(partition_, d.class_id)) {
    throw ConfigError(where + "class " + std::to_string(d.class_id) + " is not a " + to_string(partition_) +
                      " class of " + to_string(split_.dataset) + " fold " + std::to_string(split_.fold));
  }
  if (d.supports.empty()) throw ConfigError(where + "episode has no support image");
  auto read = [&](const std::string& image, torch::Tensor& img, torch::Tensor& mask) {
    const auto pos = index_->find(image);
    if (pos < 0) throw LoadError(where + "image not in the dataset index: " + image);
    try {
      img = image_to_tensor(index_->load_image(static_cast<size_t>(pos)), options_.image_size);
      mask = label_to_mask(index_->class_mask(static_cast<size_t>(pos), d.class_id), 1, options_.image_size);
    } catch (const LoadError& e) {
      throw LoadError(where + e.what());
    }
  };
  Episode e;
  e.class_id = d.class_id;
  e.descriptor = d;
  read(d.query, e.query_image, e.query_mask);
  for (const auto& s : d.supports) {
    torch::Tensor img, mask;
    read(s, img, mask);
    e.support_images.push_back(img);
    e.support_masks.push_back(mask);
  }
  return e;
}

Episode EpisodeSampler::sample(std::mt19937_64& rng) const {
  for (int attempt = 0; attempt < options_.max_retries; ++attempt) {
    auto e = load(draw(rng));
    bool ok = e.query_mask.any().item<bool>();
    for (const auto& m : e.support_masks) ok = ok && m.any().item<bool>();
    if (ok) return e;
  }
  throw SamplingError("no episode with nonempty masks after " + std::to_string(options_.max_retries) + " draws");
}

std::vector<EpisodeDescriptor> test_pair_list(const EpisodeSampler& sampler, uint64_t seed, int n) {
  if (n <= 0) throw ConfigError("test pair count must be positive, got " + std::to_string(n));
  std::mt19937_64 rng(seed);
  std::vector<EpisodeDescriptor> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(sampler.sample(rng).descriptor);
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

void write_manifest(const fs::path& path, const Manifest& manifest) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write manifest " + path.string());
  out << "#";
  for (const auto& [k, v] : manifest.meta) out << ' ' << k << '=' << v;
  out << '\n';
  for (const auto& e : manifest.entries) {
    out << e.query << '\t';
    for (size_t i = 0; i < e.supports.size(); ++i) out << (i ? ";" : "") << e.supports[i];
    out << '\t' << e.class_id << '\n';
  }
  if (!out) throw LoadError("failed writing manifest " + path.string());
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read manifest " + path.string());
  Manifest m;
  std::string line;
  size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream words(line.substr(1));
      std::string kv;
      while (words >> kv) {
        auto eq = kv.find('=');
        if (eq != std::string::npos) m.meta[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
      continue;
    }
    const auto bad = [&](const std::string& why) {
      return LoadError(path.string() + ":" + std::to_string(number) + ": " + why);
    };
    auto t1 = line.find('\t');
    auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw bad("expected three tab-separated fields");
    EpisodeDescriptor d;
    d.line = number;
    d.query = line.substr(0, t1);
    std::string supports = line.substr(t1 + 1, t2 - t1 - 1);
    for (size_t start = 0; start <= supports.size();) {
      auto end = supports.find(';', start);
      if (end == std::string::npos) end = supports.size();
      if (end > start) d.supports.push_back(supports.substr(start, end - start));
      start = end + 1;
    }
    try {
      size_t used = 0;
      d.class_id = std::stoi(line.substr(t2 + 1), &used);
      if (used != line.size() - t2 - 1) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw bad("class id is not an integer");
    }
    if (d.query.empty() || d.supports.empty()) throw bad("missing query or support paths");
    m.entries.push_back(std::move(d));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

cv::Vec3b class_color(int class_id, int classes) {
  cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(static_cast<double>(class_id * 180 / std::max(classes, 1)), 220, 230));
  cv::Mat rgb;
  cv::cvtColor(hsv, rgb, cv::COLOR_HSV2RGB);
  return rgb.at<cv::Vec3b>(0, 0);
}

void draw_shape(cv::Mat& target, int shape, cv::Point center, int radius, const cv::Scalar& value) {
  switch (shape % 4) {
    case 0:
      cv::rectangle(target, center - cv::Point(radius, radius * 3 / 4), center + cv::Point(radius, radius * 3 / 4),
                    value, cv::FILLED);
      break;
    case 1:
      cv::circle(target, center, radius, value, cv::FILLED);
      break;
    case 2: {
      std::vector<cv::Point> tri{center + cv::Point(0, -radius), center + cv::Point(radius, radius),
                                 center + cv::Point(-radius, radius)};
      cv::fillPoly(target, std::vector<std::vector<cv::Point>>{tri}, value);
      break;
    }
    default: {
      const int t = std::max(radius / 3, 1);
      cv::rectangle(target, center - cv::Point(radius, t), center + cv::Point(radius, t), value, cv::FILLED);
      cv::rectangle(target, center - cv::Point(t, radius), center + cv::Point(t, radius), value, cv::FILLED);
      break;
    }
  }
}

}  // namespace

void generate_synthetic_dataset(const fs::path& root, const SyntheticOptions& o) {
  if (o.classes < 2 || o.classes > 254) throw ConfigError("synthetic class count must be in 2..254");
  if (o.images_per_class < 2) throw ConfigError("need at least two images per class");
  if (o.image_size < 16) throw ConfigError("synthetic images must be at least 16 pixels");
  fs::create_directories(root / "JPEGImages");
  fs::create_directories(root / "SegmentationClass");
  fs::create_directories(root / "ImageSets" / "Segmentation");
  std::ofstream train(root / "ImageSets" / "Segmentation" / "train.txt");
  std::ofstream val(root / "ImageSets" / "Segmentation" / "val.txt");
  if (!train || !val) throw LoadError("cannot write image lists under " + root.string());

  std::mt19937_64 rng(o.seed);
  const int s = o.image_size;
  auto uniform_int = [&](int lo, int hi) { return lo + static_cast<int>(uniform_index(rng, static_cast<uint64_t>(hi - lo + 1))); };
  int counter = 0;
  for (int c = 0; c < o.classes; ++c) {
    for (int i = 0; i < o.images_per_class; ++i) {
      cv::Mat image(s, s, CV_8UC3);
      for (int y = 0; y < s; ++y) {
        auto* row = image.ptr<cv::Vec3b>(y);
        for (int x = 0; x < s; ++x) {
          for (int k = 0; k < 3; ++k) row[x][k] = static_cast<uint8_t>(40 + uniform_index(rng, 120));
        }
      }
      cv::Mat labels = cv::Mat::zeros(s, s, CV_8UC1);

      std::vector<int> objects{c};
      if (uniform_unit(rng) < o.distractor_rate) {
        objects.push_back((c + 1 + static_cast<int>(uniform_index(rng, static_cast<uint64_t>(o.classes - 1)))) %
                          o.classes);
      }
      for (size_t k = 0; k < objects.size(); ++k) {
        const int cls = objects[k];
        const int radius = uniform_int(s / 8, s / 4);
        // Two objects go to opposite halves so neither hides the other.
        int lo_x = radius, hi_x = s - 1 - radius;
        if (objects.size() == 2) {
          if (k == 0) hi_x = std::max(lo_x, s / 2 - 1);
          else lo_x = std::min(hi_x, s / 2);
        }
        const cv::Point center(uniform_int(lo_x, hi_x), uniform_int(radius, s - 1 - radius));
        cv::Mat shape = cv::Mat::zeros(s, s, CV_8UC1);
        draw_shape(shape, cls, center, radius, cv::Scalar(1));
        const auto color = class_color(cls, o.classes);
        for (int y = 0; y < s; ++y) {
          const auto* in = shape.ptr<uint8_t>(y);
          auto* px = image.ptr<cv::Vec3b>(y);
          auto* lab = labels.ptr<uint8_t>(y);
          for (int x = 0; x < s; ++x) {
            if (!in[x]) continue;
            for (int ch = 0; ch < 3; ++ch) {
              const int jitter = static_cast<int>(uniform_index(rng, 41)) - 20;
              px[x][ch] = static_cast<uint8_t>(std::clamp(color[ch] + jitter, 0, 255));
            }
            lab[x] = static_cast<uint8_t>(cls + 1);
          }
        }
      }

      char id[32];
      std::snprintf(id, sizeof(id), "syn_%06d", counter);
      write_rgb_png(root / "JPEGImages" / (std::string(id) + ".png"), image);
      write_label_png(root / "SegmentationClass" / (std::string(id) + ".png"), labels);
      (counter % 2 == 0 ? train : val) << id << '\n';
      ++counter;
    }
  }
}

}  // namespace tbtnet
