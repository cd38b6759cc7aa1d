#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mv3d/model/dit.hpp"

namespace mv3d {

struct ViewMass {
  int view = 0;  // REF(k) tag
  double mass = 0.0;
};

/// Attention mass of target queries on each reference block: per query row, the probability
/// summed over that view's keys, averaged over target rows, heads and the selected blocks
/// (all blocks when `block` < 0). Views are reported in sequence order.
inline std::vector<ViewMass> extract_router_heatmap(const AttentionRecord& rec, int block = -1) {
  const auto& seg = rec.layout.seg;
  std::vector<int> views;
  for (const auto& s : seg)
    if (s.kind == SegmentKind::Ref && std::find(views.begin(), views.end(), s.view) == views.end())
      views.push_back(s.view);
  MV3D_REQUIRE(!views.empty(), "router heatmap needs at least one reference view");
  const auto [tb, te] = rec.layout.range(SegmentKind::Target);
  MV3D_REQUIRE(te > tb, "attention record has no target rows");
  std::vector<double> acc(views.size(), 0.0);
  std::size_t count = 0;
  const std::size_t L = rec.layout.size();
  for (int b = 0; b < rec.blocks; ++b) {
    if (block >= 0 && b != block) continue;
    for (int h = 0; h < rec.heads; ++h) {
      const Tensor& p = rec.at(b, h);
      for (std::size_t r = tb; r < te; ++r) {
        for (std::size_t c = 0; c < L; ++c) {
          if (seg[c].kind != SegmentKind::Ref) continue;
          const auto it = std::find(views.begin(), views.end(), seg[c].view);
          acc[std::size_t(it - views.begin())] += p.at(r, c);
        }
        ++count;
      }
    }
  }
  std::vector<ViewMass> out;
  for (std::size_t i = 0; i < views.size(); ++i) out.push_back({views[i], acc[i] / double(count)});
  return out;
}

/// Rows (block, head, query_segment, key_segment, mass): mean over query rows of the summed
/// probability on the key segment.
inline void write_attention_csv(const std::filesystem::path& path, const AttentionRecord& rec) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "# version 1\n";
  f << "block,head,query_segment,key_segment,mass\n";
  std::vector<std::string> labels;
  for (const auto& s : rec.layout.seg)
    if (labels.empty() || labels.back() != s.label()) labels.push_back(s.label());
  const std::size_t L = rec.layout.size();
  char buf[64];
  for (int b = 0; b < rec.blocks; ++b)
    for (int h = 0; h < rec.heads; ++h) {
      const Tensor& p = rec.at(b, h);
      for (const auto& qs : labels)
        for (const auto& ks : labels) {
          double m = 0.0;
          std::size_t rows = 0;
          for (std::size_t r = 0; r < L; ++r) {
            if (rec.layout.seg[r].label() != qs) continue;
            ++rows;
            for (std::size_t c = 0; c < L; ++c)
              if (rec.layout.seg[c].label() == ks) m += p.at(r, c);
          }
          std::snprintf(buf, sizeof buf, "%.9g", m / double(rows));
          f << b << ',' << h << ',' << qs << ',' << ks << ',' << buf << '\n';
        }
    }
  if (!f) throw IoError("write failed: " + path.string());
}

/// Binary PGM of a row-major grid of values in [0, vmax], each cell scaled up `zoom` times.
inline void write_pgm(const std::filesystem::path& path, const std::vector<double>& cells, int gw, int gh,
                      double vmax, int zoom = 8) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "P5\n" << gw * zoom << ' ' << gh * zoom << "\n255\n";
  for (int y = 0; y < gh * zoom; ++y)
    for (int x = 0; x < gw * zoom; ++x) {
      const double v = vmax > 0 ? cells[std::size_t((y / zoom) * gw + x / zoom)] / vmax : 0.0;
      f.put(static_cast<char>(static_cast<unsigned char>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5)));
    }
  if (!f) throw IoError("write failed: " + path.string());
}

/// Per-view spatial heatmap: attention from target queries onto each key patch of REF(k),
/// averaged over target rows, heads and blocks. One PGM per view, shared intensity scale.
inline std::vector<std::filesystem::path> write_router_pgms(const std::filesystem::path& dir,
                                                            const AttentionRecord& rec, int grid_w, int grid_h) {
  const auto [tb, te] = rec.layout.range(SegmentKind::Target);
  const std::size_t L = rec.layout.size();
  std::map<int, std::vector<double>> cells;
  for (std::size_t c = 0; c < L; ++c)
    if (rec.layout.seg[c].kind == SegmentKind::Ref) cells[rec.layout.seg[c].view].assign(std::size_t(grid_w * grid_h), 0.0);
  MV3D_REQUIRE(!cells.empty(), "router heatmap needs at least one reference view");
  const double norm = double((te - tb) * std::size_t(rec.heads * rec.blocks));
  for (int b = 0; b < rec.blocks; ++b)
    for (int h = 0; h < rec.heads; ++h) {
      const Tensor& p = rec.at(b, h);
      for (std::size_t r = tb; r < te; ++r)
        for (std::size_t c = 0; c < L; ++c) {
          const auto& s = rec.layout.seg[c];
          if (s.kind != SegmentKind::Ref) continue;
          const auto& pos = rec.layout.pos[c];
          cells[s.view][std::size_t(pos.y * grid_w + pos.x)] += p.at(r, c) / norm;
        }
    }
  double vmax = 0.0;
  for (const auto& [k, v] : cells) vmax = std::max(vmax, *std::max_element(v.begin(), v.end()));
  std::vector<std::filesystem::path> out;
  for (const auto& [k, v] : cells) {
    auto path = dir / ("ref" + std::to_string(k) + ".pgm");
    write_pgm(path, v, grid_w, grid_h, vmax);
    out.push_back(path);
  }
  return out;
}

}  // namespace mv3d
