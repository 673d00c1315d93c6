#pragma once

// Locale-independent CSV output ('.' decimal point, LF line endings).

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dflow/cli/config.hpp"
#include "dflow/engine/errors.hpp"
#include "dflow/metrics/metrics.hpp"

namespace dflow {

inline constexpr const char* kMetricsHeader = "step,rev_kl,ess_r,hausdorff,fwd_kl,ess_f,n_samples,seed";

inline std::string metrics_row(const MetricsRecord& r) {
  using detail::format_double;
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  return std::to_string(r.step) + "," + format_double(r.rev_kl) + "," + format_double(r.ess_r) + "," +
         format_double(r.hausdorff) + "," + opt(r.fwd_kl) + "," + opt(r.ess_f) + "," + std::to_string(r.n_samples) +
         "," + std::to_string(r.seed);
}

class CsvFile {
 public:
  CsvFile(const std::string& path, const std::string& header, bool append = false)
      : out_(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc)) {
    if (!out_) throw Error("cannot write '" + path + "'");
    if (!header.empty()) line(header);
  }
  void line(const std::string& s) {
    out_ << s << '\n';
    if (!out_) throw Error("write failed");
  }
  void flush() { out_.flush(); }
  void row(const std::vector<double>& values, const std::string& prefix = "") {
    std::string s = prefix;
    for (std::size_t i = 0; i < values.size(); ++i) s += (i || !prefix.empty() ? "," : "") + detail::format_double(values[i]);
    line(s);
  }

 private:
  std::ofstream out_;
};

/// Sample dump: header "x1,...,xn", then one row per sample.
inline void write_samples_csv(const std::string& path, const Matrix& x) {
  std::string header;
  for (Eigen::Index i = 0; i < x.rows(); ++i) header += (i ? ",x" : "x") + std::to_string(i + 1);
  CsvFile f(path, header);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    std::vector<double> v(x.col(j).data(), x.col(j).data() + x.rows());
    f.row(v);
  }
}

inline void write_histogram_csv(const std::string& path, const MeanFieldHistogram& h) {
  CsvFile f(path, "bin_center,count,reference_density");
  for (std::size_t i = 0; i < h.centers.size(); ++i)
    f.line(detail::format_double(h.centers[i]) + "," + std::to_string(h.counts[i]) + "," +
           detail::format_double(h.reference[i]));
}

}  // namespace dflow
