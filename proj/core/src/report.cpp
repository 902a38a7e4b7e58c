#include "msrn/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "msrn/scales.hpp"

namespace msrn {

namespace {

const Eigen::IOFormat kMatFmt(6, 0, "  ", "\n", "    [", "]");

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string level_tag(int level, bool constant) {
  if (constant) return "conserved";
  switch (level) {
    case 0: return "slow";
    case 1: return "fast-1";
    default: return "fast-2";
  }
}

void describe_level(std::ostream& os, const char* name, const ScaleLevel& lvl,
                    const ReactionNetwork& net) {
  os << name << ": ";
  if (!lvl.m.finite) {
    os << "absent\n";
    return;
  }
  os << "m = " << lvl.m.m.str() << "\n";
  auto list = [&](const char* what, const std::vector<std::size_t>& ks) {
    os << "  " << what << ":";
    if (ks.empty()) os << " none";
    for (auto k : ks) os << " " << net.reactions[k].name;
    os << "\n";
  };
  list("jump reactions", lvl.jump_class);
  list("drift reactions", lvl.drift_class);
}

}  // namespace

std::string analysis_report(const NetworkAnalysis& an) {
  const auto& dec = *an.dec;
  const auto& net = dec.net;
  const auto& avg = *an.avg;
  const auto& cor = *an.cor;
  std::ostringstream os;

  os << "network: " << net.name << "\n";
  os << "N = " << dec.scaling.N << ", time exponent gamma = " << an.gamma_used.str();
  if (an.gamma_adjusted)
    os << "  (derived: gamma = " << an.gamma_input.str()
       << " leaves residual slow drift; using gamma* = " << an.gamma_used.str() << ")";
  os << "\n\n";

  os << "species (normalized z_i = N^-alpha_i x_i):\n";
  for (const auto& sp : net.species)
    os << "  " << sp.name << "  alpha = " << sp.alpha.str()
       << "  initial count = " << sp.initial_count << "\n";
  os << "\n";

  const std::vector<Rational> rho = reaction_exponents(net, dec.scaling);
  os << "reaction exponents rho_k = nu_k . alpha + beta_k + gamma:\n";
  for (std::size_t k = 0; k < net.reactions.size(); ++k)
    os << "  " << net.reactions[k].name << "  kappa = " << fmt_g(net.reactions[k].kappa)
       << "  beta = " << net.reactions[k].beta.str() << "  rho = " << rho[k].str() << "\n";
  os << "\n";

  os << "time-scale levels:\n";
  describe_level(os, "fastest level", dec.level2.m.finite ? dec.level2 : dec.level1, net);
  if (dec.level2.m.finite) describe_level(os, "intermediate level", dec.level1, net);
  describe_level(os, "slow level", dec.level0, net);
  os << "\n";

  os << "orthogonal directions (rows of the change of basis):\n";
  for (std::size_t l = 0; l < dec.directions.size(); ++l) {
    const auto& d = dec.directions[l];
    os << "  v" << l << " [" << level_tag(d.level, d.constant) << "]  g = (";
    for (std::size_t i = 0; i < d.dir.generator.size(); ++i)
      os << (i ? ", " : "") << d.dir.generator[i].str();
    os << ")  alpha = " << d.dir.alpha.str() << "  value(0) = " << fmt_g(d.value0) << "\n";
  }
  os << "\n";

  os << "projections onto the scale blocks:\n";
  os << "  slow/conserved block:\n" << dec.Pi0.format(kMatFmt) << "\n";
  if (dec.s1) os << "  level-1 block:\n" << dec.Pi1.format(kMatFmt) << "\n";
  if (dec.s2) os << "  level-2 block:\n" << dec.Pi2.format(kMatFmt) << "\n";
  auto mismatches = [&](const char* what, const std::vector<std::size_t>& ks) {
    if (ks.empty()) return;
    os << "  note: orthogonal projection differs from the exponent-filtered limit (" << what
       << "):";
    for (auto k : ks) os << " " << net.reactions[k].name;
    os << "\n";
  };
  mismatches("level 2", dec.projection_mismatch2);
  mismatches("level 1", dec.projection_mismatch1);
  os << "\n";

  os << "averaged slow dynamics sampled along c * V0(0), c in {0.5, 0.75, 1, 1.25, 1.5}:\n";
  const Eigen::VectorXd v0s = avg.initial_v().head(static_cast<Eigen::Index>(dec.s0));
  for (double c : {0.5, 0.75, 1.0, 1.25, 1.5}) {
    const Eigen::VectorXd vs = c * v0s;
    const Eigen::VectorXd v = avg.full_v_from_slow(vs);
    os << "  v_slow = (" << vs.transpose().format(Eigen::IOFormat(6, 0, ", ")) << ")\n";
    os << "    Fbar = (" << avg.F_bar(v).transpose().format(Eigen::IOFormat(6, 0, ", "))
       << ")\n";
    os << "    dFbar:\n" << avg.F_bar_jacobian(v).format(kMatFmt) << "\n";
    os << "    Gbar:\n" << cor.Gbar(v).format(kMatFmt) << "\n";
  }
  os << "\n";

  os << "fluctuation exponent selection (r_N = N^p):\n";
  for (const auto& b : cor.bounds())
    os << "  " << (b.active ? "p <= " + b.value.str() : "inactive   ") << "  [" << b.name
       << "]\n";
  os << "  chosen p = " << cor.p().str() << "  (binding: " << cor.binding_bound()
     << "),  r_N = " << fmt_g(an.r()) << "\n\n";

  os << "correction drifts:\n";
  os << "  G0 " << (cor.G0_identically_zero() ? "== 0" : "active") << ", G1 "
     << (cor.G1_identically_zero() ? "== 0" : "active") << "\n";
  os << "  term ledger (level / kind / reaction / status):\n";
  for (const auto& t : cor.term_ledger())
    os << "    " << t.level << "  " << t.kind << "  " << net.reactions[t.reaction].name
       << "  " << t.status << "\n";
  if (cor.has_unevaluated_terms())
    os << "  warning: some structurally active terms are not evaluable in closed form\n";
  return os.str();
}

// --------------------------------------------------------------------- CSV

namespace {

void csv_row(std::ostream& os, double t, const Eigen::MatrixXd& m, Eigen::Index row) {
  os << format_double(t);
  for (Eigen::Index c = 0; c < m.cols(); ++c) os << "," << format_double(m(row, c));
  os << "\n";
}

}  // namespace

std::string trajectory_csv(const Trajectory& t) {
  std::ostringstream os;
  os << "t";
  for (const auto& c : t.components) os << "," << c;
  os << "\n";
  for (std::size_t g = 0; g < t.times.size(); ++g)
    csv_row(os, t.times[g], t.states, static_cast<Eigen::Index>(g));
  return os.str();
}

std::string summary_csv(const EnsembleSummary& s, const Eigen::MatrixXd* analytic_std) {
  std::ostringstream os;
  os << "t";
  for (const auto& c : s.components) os << ",mean_" << c << ",std_" << c << ",se_" << c;
  if (analytic_std)
    for (const auto& c : s.components) os << ",astd_" << c;
  os << "\n";
  for (std::size_t g = 0; g < s.times.size(); ++g) {
    const auto r = static_cast<Eigen::Index>(g);
    os << format_double(s.times[g]);
    for (Eigen::Index c = 0; c < s.mean.cols(); ++c)
      os << "," << format_double(s.mean(r, c)) << "," << format_double(s.stddev(r, c)) << ","
         << format_double(s.se(r, c));
    if (analytic_std)
      for (Eigen::Index c = 0; c < analytic_std->cols(); ++c)
        os << "," << format_double((*analytic_std)(r, c));
    os << "\n";
  }
  return os.str();
}

std::string comparison_csv(const ComparisonTable& t) {
  std::ostringstream os;
  os << "t";
  for (const auto& m : t.methods)
    for (const auto& c : t.components)
      os << ",mean_" << c << "_" << m.method << ",std_" << c << "_" << m.method;
  os << "\n";
  for (std::size_t g = 0; g < t.times.size(); ++g) {
    const auto r = static_cast<Eigen::Index>(g);
    os << format_double(t.times[g]);
    for (const auto& m : t.methods)
      for (Eigen::Index c = 0; c < m.mean.cols(); ++c)
        os << "," << format_double(m.mean(r, c)) << "," << format_double(m.stddev(r, c));
    os << "\n";
  }
  os << "# max relative deviation from " << t.methods[t.baseline].method << " (per component)\n";
  for (std::size_t m = 0; m < t.methods.size(); ++m) {
    if (m == t.baseline) continue;
    os << "# " << t.methods[m].method << ":";
    for (Eigen::Index c = 0; c < t.max_rel_dev.cols(); ++c)
      os << " " << t.components[static_cast<std::size_t>(c)] << "="
         << fmt_g(t.max_rel_dev(static_cast<Eigen::Index>(m), c));
    os << "\n";
  }
  return os.str();
}

std::string absorption_csv(const AbsorptionEstimate& est) {
  std::ostringstream os;
  os << "runs," << est.runs << "\n";
  os << "absorbed," << est.absorbed << "\n";
  os << "escaped," << est.escaped << "\n";
  os << "censored," << est.censored << "\n";
  os << "estimate," << format_double(est.ci.estimate) << "\n";
  os << "wilson95_low," << format_double(est.ci.low) << "\n";
  os << "wilson95_high," << format_double(est.ci.high) << "\n";
  return os.str();
}

// --------------------------------------------------------------------- SVG

namespace {

struct Mapper {
  double lo = 0, hi = 1, a0 = 0, a1 = 1;
  double operator()(double v) const { return a0 + (v - lo) / (hi - lo) * (a1 - a0); }
};

// Tick step of the form {1,2,5} * 10^k giving 4-8 ticks over the range.
double nice_step(double range) {
  if (!(range > 0)) return 1.0;
  const double raw = range / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0}) {
    if (raw <= m * mag) return m * mag;
  }
  return 10.0 * mag;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

std::string render_svg(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<PlotSeries>& series) {
  const double W = 880, H = 560, ml = 72, mr = 24, mt = 46, mb = 56;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double b = s.band.empty() ? 0.0 : std::abs(s.band[i]);
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (first) {
        xmin = xmax = s.x[i];
        ymin = s.y[i] - b;
        ymax = s.y[i] + b;
        first = false;
      } else {
        xmin = std::min(xmin, s.x[i]);
        xmax = std::max(xmax, s.x[i]);
        ymin = std::min(ymin, s.y[i] - b);
        ymax = std::max(ymax, s.y[i] + b);
      }
    }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  const double ypad = 0.04 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;
  const Mapper X{xmin, xmax, ml, W - mr};
  const Mapper Y{ymin, ymax, H - mb, mt};

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\""
     << " font-size=\"16\">" << title << "</text>\n";

  // gridlines and ticks
  const double xs = nice_step(xmax - xmin), ys = nice_step(ymax - ymin);
  os << "<g font-family=\"sans-serif\" font-size=\"11\" fill=\"#333\">\n";
  for (double v = std::ceil(xmin / xs) * xs; v <= xmax + 1e-9 * xs; v += xs) {
    const double px = X(v);
    os << "<line x1=\"" << px << "\" y1=\"" << mt << "\" x2=\"" << px << "\" y2=\"" << H - mb
       << "\" stroke=\"#e5e5e5\" stroke-width=\"1\"/>\n";
    os << "<text x=\"" << px << "\" y=\"" << H - mb + 16 << "\" text-anchor=\"middle\">"
       << fmt_g(v) << "</text>\n";
  }
  for (double v = std::ceil(ymin / ys) * ys; v <= ymax + 1e-9 * ys; v += ys) {
    const double py = Y(v);
    os << "<line x1=\"" << ml << "\" y1=\"" << py << "\" x2=\"" << W - mr << "\" y2=\"" << py
       << "\" stroke=\"#e5e5e5\" stroke-width=\"1\"/>\n";
    os << "<text x=\"" << ml - 6 << "\" y=\"" << py + 4 << "\" text-anchor=\"end\">" << fmt_g(v)
       << "</text>\n";
  }
  os << "</g>\n";
  os << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << W - ml - mr << "\" height=\""
     << H - mt - mb << "\" fill=\"none\" stroke=\"#444\" stroke-width=\"1\"/>\n";
  os << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 14
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" << x_label
     << "</text>\n";
  os << "<text x=\"18\" y=\"" << (mt + H - mb) / 2
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\""
     << "rotate(-90 18 " << (mt + H - mb) / 2 << ")\">" << y_label << "</text>\n";

  // bands first so no line is hidden
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    if (s.band.empty()) continue;
    const char* col = kPalette[si % (sizeof kPalette / sizeof *kPalette)];
    os << "<polygon fill=\"" << col << "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      os << X(s.x[i]) << "," << Y(s.y[i] + std::abs(s.band[i])) << " ";
    for (std::size_t i = s.x.size(); i-- > 0;)
      os << X(s.x[i]) << "," << Y(s.y[i] - std::abs(s.band[i])) << " ";
    os << "\"/>\n";
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* col = kPalette[si % (sizeof kPalette / sizeof *kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.6\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i])) os << X(s.x[i]) << "," << Y(s.y[i]) << " ";
    os << "\"/>\n";
  }

  // legend
  os << "<g font-family=\"sans-serif\" font-size=\"12\">\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const char* col = kPalette[si % (sizeof kPalette / sizeof *kPalette)];
    const double ly = mt + 14 + 17 * static_cast<double>(si);
    os << "<line x1=\"" << W - mr - 150 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - mr - 126
       << "\" y2=\"" << ly - 4 << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - mr - 120 << "\" y=\"" << ly << "\">" << series[si].label
       << "</text>\n";
  }
  os << "</g>\n</svg>\n";
  return os.str();
}

std::string render_csv_svg(const std::string& title, const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty CSV");
  std::vector<std::string> header;
  {
    std::istringstream h(line);
    std::string tok;
    while (std::getline(h, tok, ',')) header.push_back(tok);
  }
  if (header.empty() || header[0] != "t")
    throw std::runtime_error("CSV does not start with a 't' column");

  std::vector<std::vector<double>> cols(header.size());
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream r(line);
    std::string tok;
    std::size_t c = 0;
    while (std::getline(r, tok, ',') && c < cols.size()) cols[c++].push_back(std::stod(tok));
  }

  auto find_col = [&](const std::string& name) -> int {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name) return static_cast<int>(c);
    return -1;
  };

  std::vector<PlotSeries> series;
  for (std::size_t c = 1; c < header.size(); ++c) {
    const std::string& name = header[c];
    if (name.rfind("std_", 0) == 0 || name.rfind("se_", 0) == 0 || name.rfind("astd_", 0) == 0)
      continue;
    PlotSeries s;
    s.x = cols[0];
    s.y = cols[c];
    if (name.rfind("mean_", 0) == 0) {
      s.label = name.substr(5);
      const int sc = find_col("std_" + s.label);
      if (sc >= 0) s.band = cols[static_cast<std::size_t>(sc)];
    } else {
      s.label = name;
    }
    series.push_back(std::move(s));
  }
  return render_svg(title, "t", "value", series);
}

// ----------------------------------------------------------------- artifacts

namespace {

struct Sha1 {
  std::uint32_t h[5] = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u, 0xC3D2E1F0u};
  std::uint64_t total = 0;
  unsigned char buf[64];
  std::size_t fill = 0;

  static std::uint32_t rol(std::uint32_t v, int s) { return (v << s) | (v >> (32 - s)); }

  void block(const unsigned char* p) {
    std::uint32_t w[80];
    for (int i = 0; i < 16; ++i)
      w[i] = static_cast<std::uint32_t>(p[4 * i]) << 24 |
             static_cast<std::uint32_t>(p[4 * i + 1]) << 16 |
             static_cast<std::uint32_t>(p[4 * i + 2]) << 8 | p[4 * i + 3];
    for (int i = 16; i < 80; ++i) w[i] = rol(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
    std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4];
    for (int i = 0; i < 80; ++i) {
      std::uint32_t f, k;
      if (i < 20) {
        f = (b & c) | (~b & d);
        k = 0x5A827999u;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ED9EBA1u;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8F1BBCDCu;
      } else {
        f = b ^ c ^ d;
        k = 0xCA62C1D6u;
      }
      const std::uint32_t t = rol(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = rol(b, 30);
      b = a;
      a = t;
    }
    h[0] += a;
    h[1] += b;
    h[2] += c;
    h[3] += d;
    h[4] += e;
  }

  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    total += n;
    while (n) {
      const std::size_t take = std::min(n, sizeof buf - fill);
      std::copy(p, p + take, buf + fill);
      fill += take;
      p += take;
      n -= take;
      if (fill == sizeof buf) {
        block(buf);
        fill = 0;
      }
    }
  }

  std::string hex_digest() {
    const std::uint64_t bits = total * 8;
    const unsigned char one = 0x80;
    update(&one, 1);
    const unsigned char zero = 0;
    while (fill != 56) update(&zero, 1);
    unsigned char len[8];
    for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>(bits >> (56 - 8 * i));
    update(len, 8);
    std::ostringstream os;
    for (auto v : h) {
      char b[9];
      std::snprintf(b, sizeof b, "%08x", v);
      os << b;
    }
    return os.str();
  }
};

}  // namespace

std::string git_blob_hash(const std::string& content) {
  Sha1 s;
  const std::string head = "blob " + std::to_string(content.size());
  s.update(head.data(), head.size() + 1);  // includes the terminating NUL
  s.update(content.data(), content.size());
  return s.hex_digest();
}

void write_file_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
  }
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw std::runtime_error("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw std::runtime_error("cannot move '" + tmp.string() + "' to '" + target.string() +
                             "': " + ec.message());
  }
}

}  // namespace msrn
