#include "flowseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "flowseg/persistence.hpp"

namespace flowseg {

namespace {

void check_same(const Volume& a, const Volume& b, const char* what) {
  if (a.dims != b.dims) throw ShapeError(std::string(what) + ": mask dimensions differ");
}

bool on(const Volume& v, std::size_t i) { return v.values[i] > 0.5f; }

// 1D squared distance transform of f along a line with sample spacing h
// (lower envelope of parabolas).
void edt_1d(std::vector<double>& f, double h, std::vector<double>& d, std::vector<std::int64_t>& v,
            std::vector<double>& z) {
  const auto n = static_cast<std::int64_t>(f.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::int64_t k = -1;
  for (std::int64_t q = 0; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == inf) continue;
    const double xq = static_cast<double>(q) * h;
    while (k >= 0) {
      const std::int64_t p = v[static_cast<std::size_t>(k)];
      const double xp = static_cast<double>(p) * h;
      const double s = ((f[static_cast<std::size_t>(q)] + xq * xq) - (f[static_cast<std::size_t>(p)] + xp * xp)) /
                       (2.0 * (xq - xp));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = k == 0 ? -inf : [&] {
      const std::int64_t p = v[static_cast<std::size_t>(k - 1)];
      const double xp = static_cast<double>(p) * h;
      return ((f[static_cast<std::size_t>(q)] + xq * xq) - (f[static_cast<std::size_t>(p)] + xp * xp)) /
             (2.0 * (xq - xp));
    }();
  }
  if (k < 0) return;  // no sites on this line: leave it at infinity
  std::int64_t j = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    const double xq = static_cast<double>(q) * h;
    while (j < k && z[static_cast<std::size_t>(j + 1)] < xq) ++j;
    const std::int64_t p = v[static_cast<std::size_t>(j)];
    const double dx = xq - static_cast<double>(p) * h;
    d[static_cast<std::size_t>(q)] = dx * dx + f[static_cast<std::size_t>(p)];
  }
  f = d;
}

}  // namespace

double dice(const Volume& a, const Volume& b) {
  check_same(a, b, "dice");
  std::int64_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const bool x = on(a, i), y = on(b, i);
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

std::vector<std::array<std::int64_t, 3>> surface_voxels(const Volume& mask) {
  const auto [H, W, D] = mask.dims;
  auto inside = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    return i >= 0 && j >= 0 && k >= 0 && i < H && j < W && k < D && mask.at(i, j, k) > 0.5f;
  };
  std::vector<std::array<std::int64_t, 3>> out;
  for (std::int64_t i = 0; i < H; ++i) {
    for (std::int64_t j = 0; j < W; ++j) {
      for (std::int64_t k = 0; k < D; ++k) {
        if (!inside(i, j, k)) continue;
        if (!inside(i - 1, j, k) || !inside(i + 1, j, k) || !inside(i, j - 1, k) || !inside(i, j + 1, k) ||
            !inside(i, j, k - 1) || !inside(i, j, k + 1)) {
          out.push_back({i, j, k});
        }
      }
    }
  }
  return out;
}

std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& seeds, std::array<std::int64_t, 3> dims,
                                               std::array<float, 3> spacing) {
  const auto [H, W, D] = dims;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) g[i] = seeds[i] ? 0.0 : inf;

  const std::array<std::int64_t, 3> stride{W * D, D, 1};
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t n = dims[static_cast<std::size_t>(axis)];
    std::vector<double> f(static_cast<std::size_t>(n)), d(f.size()), z(f.size() + 1);
    std::vector<std::int64_t> v(f.size());
    // Enumerate every line along `axis` by its starting offset.
    for (std::int64_t i = 0; i < H; ++i) {
      for (std::int64_t j = 0; j < W; ++j) {
        for (std::int64_t k = 0; k < D; ++k) {
          const std::array<std::int64_t, 3> idx{i, j, k};
          if (idx[static_cast<std::size_t>(axis)] != 0) continue;
          const std::int64_t base = i * stride[0] + j * stride[1] + k * stride[2];
          const std::int64_t st = stride[static_cast<std::size_t>(axis)];
          for (std::int64_t q = 0; q < n; ++q) f[static_cast<std::size_t>(q)] = g[static_cast<std::size_t>(base + q * st)];
          edt_1d(f, spacing[static_cast<std::size_t>(axis)], d, v, z);
          for (std::int64_t q = 0; q < n; ++q) g[static_cast<std::size_t>(base + q * st)] = f[static_cast<std::size_t>(q)];
        }
      }
    }
  }
  return g;
}

double empty_mask_penalty(const Volume& like) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double e = static_cast<double>(like.dims[static_cast<std::size_t>(a)]) * like.spacing[static_cast<std::size_t>(a)];
    s += e * e;
  }
  return std::sqrt(s);
}

double mean_surface_distance(const Volume& a, const Volume& b) {
  check_same(a, b, "mean_surface_distance");
  for (float s : a.spacing) {
    if (!(s > 0.0f)) throw std::invalid_argument("mean_surface_distance: spacing must be positive");
  }
  const auto sa = surface_voxels(a), sb = surface_voxels(b);
  if (sa.empty() && sb.empty()) return 0.0;
  if (sa.empty() || sb.empty()) return empty_mask_penalty(a);

  auto seeds = [&](const std::vector<std::array<std::int64_t, 3>>& s) {
    std::vector<std::uint8_t> out(a.values.size(), 0);
    for (const auto& p : s) out[static_cast<std::size_t>(a.index(p[0], p[1], p[2]))] = 1;
    return out;
  };
  const auto to_b = squared_distance_transform(seeds(sb), a.dims, a.spacing);
  const auto to_a = squared_distance_transform(seeds(sa), a.dims, a.spacing);
  double total = 0.0;
  for (const auto& p : sa) total += std::sqrt(to_b[static_cast<std::size_t>(a.index(p[0], p[1], p[2]))]);
  for (const auto& p : sb) total += std::sqrt(to_a[static_cast<std::size_t>(a.index(p[0], p[1], p[2]))]);
  return total / static_cast<double>(sa.size() + sb.size());
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median: empty input");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<MethodSummary> aggregate(const std::vector<VolumeScore>& scores) {
  if (scores.empty()) throw std::invalid_argument("aggregate: no scores");
  std::map<std::string, std::map<int, std::vector<double>>> dice_by_fold;
  std::map<std::string, std::vector<double>> msd;
  for (const auto& s : scores) {
    dice_by_fold[s.method][s.fold].push_back(s.dice);
    msd[s.method].push_back(s.msd_mm);
  }
  std::vector<MethodSummary> rows;
  for (const auto& [method, folds] : dice_by_fold) {
    std::vector<double> fold_means;
    for (const auto& [_, d] : folds) {
      double s = 0.0;
      for (double x : d) s += x;
      fold_means.push_back(s / static_cast<double>(d.size()));
    }
    double mean = 0.0;
    for (double x : fold_means) mean += x;
    mean /= static_cast<double>(fold_means.size());
    double var = 0.0;
    for (double x : fold_means) var += (x - mean) * (x - mean);
    var /= static_cast<double>(fold_means.size());
    rows.push_back({method, mean, std::sqrt(var), median(msd.at(method)), msd.at(method).size()});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const MethodSummary& x, const MethodSummary& y) {
    return x.mean_dice != y.mean_dice ? x.mean_dice > y.mean_dice : x.method < y.method;
  });
  return rows;
}

std::string method_label(const std::string& method) {
  if (method == "tfg") return "Ours";
  if (method == "cam") return "CAM";
  if (method == "gradcam") return "Grad-CAM";
  return method;
}

std::string results_csv(const std::vector<VolumeScore>& scores) {
  CsvWriter csv({"method", "fold", "volume_id", "dice", "msd_mm"});
  for (const auto& s : scores) {
    csv.row({s.method, std::to_string(s.fold), std::to_string(s.volume_id), fmt_float(s.dice), fmt_float(s.msd_mm)});
  }
  return csv.str();
}

std::string summary_csv(const std::vector<MethodSummary>& rows) {
  CsvWriter csv({"method", "mean_dice", "std_dice", "median_msd"});
  for (const auto& r : rows) csv.row({r.method, fmt_float(r.mean_dice), fmt_float(r.std_dice), fmt_float(r.median_msd)});
  return csv.str();
}

std::string summary_table(const std::vector<MethodSummary>& rows) {
  auto fixed2 = [](double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << v;
    return os.str();
  };
  std::size_t name_w = 0, dice_w = 0;
  std::vector<std::pair<std::string, std::string>> cells;
  for (const auto& r : rows) {
    cells.emplace_back(method_label(r.method), fixed2(100.0 * r.mean_dice) + "±" + fixed2(100.0 * r.std_dice));
    name_w = std::max(name_w, cells.back().first.size());
    dice_w = std::max(dice_w, cells.back().second.size());
  }
  std::string out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::string name = cells[i].first, d = cells[i].second;
    name.resize(name_w, ' ');
    // "±" is two bytes; pad by byte count, which is uniform across rows.
    d.resize(dice_w, ' ');
    out += name + " " + d + " " + fixed2(rows[i].median_msd) + "\n";
  }
  return out;
}

}  // namespace flowseg
