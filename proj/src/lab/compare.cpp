#include <algorithm>
#include <stdexcept>

#include <fmt/format.h>

#include "bard/lab.hpp"

namespace bard::lab {

namespace {

std::optional<double> delta(const std::optional<double>& a, const std::optional<double>& b) {
  if (!a || !b) return std::nullopt;
  return *b - *a;
}

std::string cell(const std::optional<double>& v) { return v ? fmt::format("{:.4f}", *v) : "n/a"; }

std::string label(const std::optional<int>& b) { return b ? std::to_string(*b) : "n/a"; }

std::vector<int> swept(const evalkit::EvalReport& r) {
  std::vector<int> out;
  for (const auto& row : r.rows)
    if (row.budget) out.push_back(*row.budget);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::optional<double> ComparisonRow::d_fid() const { return delta(fid_a, fid_b); }
std::optional<double> ComparisonRow::d_ups() const { return delta(ups_a, ups_b); }

Comparison compare_reports(const evalkit::EvalReport& a, const evalkit::EvalReport& b) {
  const auto ba = swept(a), bb = swept(b);
  if (ba != bb) {
    std::vector<int> diff;
    std::set_symmetric_difference(ba.begin(), ba.end(), bb.begin(), bb.end(), std::back_inserter(diff));
    std::string list;
    for (int d : diff) list += (list.empty() ? "" : ", ") + std::to_string(d);
    throw std::invalid_argument(fmt::format("budget sweeps differ; budgets in only one report: {}", list));
  }
  Comparison c;
  for (const auto& ra : a.rows) {
    const auto* rb = b.row(ra.budget);
    if (!rb) continue;  // the unconstrained row appears only when both have it
    ComparisonRow row;
    row.budget = ra.budget;
    row.acc_a = ra.accuracy;
    row.acc_b = rb->accuracy;
    row.fid_a = ra.fidelity;
    row.fid_b = rb->fidelity;
    row.ups_a = ra.ups;
    row.ups_b = rb->ups;
    c.rows.push_back(row);
  }
  c.mean_ups_a = a.mean_ups;
  c.mean_ups_b = b.mean_ups;
  return c;
}

Comparison compare_runs(const std::filesystem::path& run_a, const std::filesystem::path& run_b) {
  return compare_reports(load_eval_report(run_a), load_eval_report(run_b));
}

std::string to_csv(const Comparison& c) {
  std::string out = "budget,acc_a,acc_b,d_acc,fid_a,fid_b,d_fid,ups_a,ups_b,d_ups\n";
  for (const auto& r : c.rows)
    out += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", label(r.budget), r.acc_a, r.acc_b, r.d_acc(), cell(r.fid_a),
                       cell(r.fid_b), cell(r.d_fid()), cell(r.ups_a), cell(r.ups_b), cell(r.d_ups()));
  out += fmt::format("avg,,,,,,,{},{},{}\n", c.mean_ups_a, c.mean_ups_b, c.d_mean_ups());
  return out;
}

std::string to_table(const Comparison& c) {
  std::string out = fmt::format("{:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "budget", "acc_a",
                                "acc_b", "d_acc", "fid_a", "fid_b", "d_fid", "ups_a", "ups_b", "d_ups");
  for (const auto& r : c.rows)
    out += fmt::format("{:>6} {:>8.4f} {:>8.4f} {:>+8.4f} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n", label(r.budget),
                       r.acc_a, r.acc_b, r.d_acc(), cell(r.fid_a), cell(r.fid_b), cell(r.d_fid()), cell(r.ups_a),
                       cell(r.ups_b), cell(r.d_ups()));
  out += fmt::format("{:>6} {:>62} {:>8.4f} {:>8.4f} {:>+8.4f}\n", "avg", "", c.mean_ups_a, c.mean_ups_b,
                     c.d_mean_ups());
  return out;
}

}  // namespace bard::lab
