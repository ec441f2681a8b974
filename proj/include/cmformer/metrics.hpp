#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace cmf {

struct MetricsReport {
  std::string domain;
  std::string checkpoint;
  std::vector<std::optional<double>> per_class_iou;  // nullopt = class absent
  std::optional<double> miou;  // nullopt when no class is present at all
};

// Row-major K x K confusion over non-ignore pixels; m[gt * k + pred].
struct Confusion {
  std::size_t k = 0;
  std::vector<std::uint64_t> m;

  explicit Confusion(std::size_t n_classes)
      : k(n_classes), m(n_classes * n_classes, 0) {}

  void add(const std::uint8_t* pred, const std::uint8_t* gt, std::size_t n);
  void merge(const Confusion& other);
};

// IoU_c = TP / (TP + FP + FN); classes with an empty union are excluded from
// the mean.
MetricsReport miou_from_confusion(const Confusion& c);

MetricsReport confusion_and_miou(const std::vector<std::uint8_t>& pred,
                                 const std::vector<std::uint8_t>& gt,
                                 std::size_t n_classes);

}  // namespace cmf
