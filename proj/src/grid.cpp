#include "dmckn/grid.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "dmckn/error.hpp"

namespace dmckn {

std::string_view to_string(Direction d) noexcept {
  switch (d) {
    case Direction::Up: return "up";
    case Direction::Down: return "down";
    case Direction::Left: return "left";
    case Direction::Right: return "right";
  }
  return "?";
}

GridSpec build_grid(std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) {
    throw ArgumentError("grid: dimensions must be positive, got " + std::to_string(rows) + "x" +
                        std::to_string(cols));
  }
  return GridSpec{rows, cols};
}

std::optional<std::size_t> neighbor(const GridSpec& grid, std::size_t cell, Direction d) noexcept {
  const std::size_t r = grid.row_of(cell), c = grid.col_of(cell);
  switch (d) {
    case Direction::Up:
      if (r == 0) return std::nullopt;
      return grid.cell(r - 1, c);
    case Direction::Down:
      if (r + 1 >= grid.rows) return std::nullopt;
      return grid.cell(r + 1, c);
    case Direction::Left:
      if (c == 0) return std::nullopt;
      return grid.cell(r, c - 1);
    case Direction::Right:
      if (c + 1 >= grid.cols) return std::nullopt;
      return grid.cell(r, c + 1);
  }
  return std::nullopt;
}

Tensor build_adjacency(const GridSpec& grid, Direction d) {
  const std::size_t n = grid.cells();
  Tensor mask(n, n);
  for (std::size_t x = 0; x < n; ++x)
    if (auto nb = neighbor(grid, x, d)) mask(x, *nb) = 1.0;
  return mask;
}

std::shared_ptr<const ad::RowSupport> mask_support(const Tensor& mask) {
  auto s = std::make_shared<ad::RowSupport>();
  s->offsets.reserve(mask.rows() + 1);
  s->offsets.push_back(0);
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    for (std::size_t c = 0; c < mask.cols(); ++c)
      if (mask(r, c) != 0.0) s->columns.push_back(static_cast<std::uint32_t>(c));
    s->offsets.push_back(static_cast<std::uint32_t>(s->columns.size()));
  }
  return s;
}

void NeighborhoodSystem::reproject() {
  for (std::size_t c = 0; c < kDirectionCount; ++c)
    for (std::size_t i = 0; i < weights[c].size(); ++i)
      if (masks[c][i] == 0.0) weights[c][i] = 0.0;
}

NeighborhoodSystem init_neighborhood(const GridSpec& grid) {
  NeighborhoodSystem ns;
  ns.grid = grid;
  for (Direction d : kDirections) {
    ns.masks[index_of(d)] = build_adjacency(grid, d);
    ns.weights[index_of(d)] = ns.masks[index_of(d)];
  }
  return ns;
}

PositionalEncoding positional_encoding(const GridSpec& grid, std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) throw ArgumentError("positional_encoding: dim must be even and >= 2, got " + std::to_string(dim));
  PositionalEncoding pe;
  pe.dim = dim;
  pe.table = Tensor(grid.cells(), dim);
  for (std::size_t x = 0; x < grid.cells(); ++x) {
    const double u = static_cast<double>(grid.row_of(x)) / static_cast<double>(grid.rows);
    const double v = static_cast<double>(grid.col_of(x)) / static_cast<double>(grid.cols);
    pe.table(x, 0) = u;
    pe.table(x, 1) = v;
    double freq = std::numbers::pi;
    for (std::size_t k = 2; k + 1 < dim; k += 2, freq *= 2.0) {
      pe.table(x, k) = std::sin(freq * u);
      pe.table(x, k + 1) = std::sin(freq * v);
    }
  }
  return pe;
}

CellSets mask_neighbors(const Tensor& mask) {
  CellSets sets(mask.rows());
  for (std::size_t r = 0; r < mask.rows(); ++r)
    for (std::size_t c = 0; c < mask.cols(); ++c)
      if (mask(r, c) != 0.0) sets[r].push_back(static_cast<std::uint32_t>(c));
  return sets;
}

CellSets higher_order_neighbors(const Tensor& mask, std::size_t order) {
  if (order == 0) throw ArgumentError("higher_order_neighbors: order must be >= 1");
  const CellSets first = mask_neighbors(mask);
  CellSets current = first;
  for (std::size_t p = 2; p <= order; ++p) {
    CellSets next(first.size());
    for (std::size_t x = 0; x < first.size(); ++x) {
      auto& out = next[x];
      for (std::uint32_t xp : first[x]) {
        if (xp == x) continue;
        for (std::uint32_t y : current[xp])
          if (y != x) out.push_back(y);
      }
      std::sort(out.begin(), out.end());
      out.erase(std::unique(out.begin(), out.end()), out.end());
    }
    current = std::move(next);
  }
  return current;
}

CellSets higher_order_neighbors(const GridSpec& grid, Direction d, std::size_t order) {
  return higher_order_neighbors(build_adjacency(grid, d), order);
}

}  // namespace dmckn
