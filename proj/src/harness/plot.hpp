#pragma once

#include <string>

namespace se3ctrl::harness {

// Renders mean-abs joint error vs iteration from a traces CSV (one curve per
// method, averaged over tasks) to a self-contained SVG. Throws on a missing,
// malformed, or empty trace file; nothing is written in that case.
void plot_traces(const std::string& traces_csv, const std::string& out_svg);

}  // namespace se3ctrl::harness
