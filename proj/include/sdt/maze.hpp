#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdt/dataset.hpp"
#include "sdt/rng.hpp"

namespace sdt {

enum class Action : int { left = 0, right = 1, up = 2, down = 3 };

struct Cell {
  int x = 0;
  int y = 0;
  bool operator==(const Cell&) const = default;
};

/// Unit move for an action; "up" decreases y.
inline Cell action_delta(Action a) {
  switch (a) {
    case Action::left: return {-1, 0};
    case Action::right: return {1, 0};
    case Action::up: return {0, -1};
    default: return {0, 1};
  }
}

/// Direction of a single-cell move between adjacent cells.
inline Action move_direction(Cell from, Cell to) {
  const int dx = to.x - from.x;
  const int dy = to.y - from.y;
  if (dx == -1 && dy == 0) return Action::left;
  if (dx == 1 && dy == 0) return Action::right;
  if (dx == 0 && dy == -1) return Action::up;
  if (dx == 0 && dy == 1) return Action::down;
  throw std::invalid_argument("move_direction: cells are not adjacent");
}

/// Occupancy grid: 1 = wall, 0 = corridor, row-major cells[y * width + x].
/// Rooms live on the odd-odd lattice; the start and goal sit on the boundary.
struct MazeGrid {
  int width = 0;
  int height = 0;
  std::uint64_t seed = 0;
  std::vector<std::uint8_t> cells;

  bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
  bool is_wall(int x, int y) const { return cells[static_cast<std::size_t>(y) * width + x] != 0; }
  Cell start() const { return {0, 1}; }
  Cell goal() const { return {width - 1, height - 2}; }
};

/// Depth-first backtracker on the odd-coordinate room lattice. Produces a
/// perfect maze (the corridor graph is a tree), then opens the boundary cells
/// (0,1) and (W-1,H-2) so the start and goal are corridors.
inline MazeGrid generate_maze(std::uint64_t seed, int width, int height) {
  if (width < 5 || height < 5 || width % 2 == 0 || height % 2 == 0) {
    throw std::invalid_argument("generate_maze: dimensions must be odd and >= 5, got " +
                                std::to_string(width) + "x" + std::to_string(height));
  }
  MazeGrid grid;
  grid.width = width;
  grid.height = height;
  grid.seed = seed;
  grid.cells.assign(static_cast<std::size_t>(width) * height, 1);

  auto carve = [&](int x, int y) { grid.cells[static_cast<std::size_t>(y) * width + x] = 0; };

  const int rooms_x = (width - 1) / 2;
  const int rooms_y = (height - 1) / 2;
  std::vector<std::uint8_t> visited(static_cast<std::size_t>(rooms_x) * rooms_y, 0);
  auto room_visited = [&](int rx, int ry) -> std::uint8_t& {
    return visited[static_cast<std::size_t>(ry) * rooms_x + rx];
  };

  Rng rng(seed);
  std::vector<Cell> stack{{0, 0}};  // room coordinates
  room_visited(0, 0) = 1;
  carve(1, 1);
  constexpr int kDx[4] = {-1, 1, 0, 0};
  constexpr int kDy[4] = {0, 0, -1, 1};
  while (!stack.empty()) {
    const Cell room = stack.back();
    int options[4];
    int n_options = 0;
    for (int dir = 0; dir < 4; ++dir) {
      const int nx = room.x + kDx[dir];
      const int ny = room.y + kDy[dir];
      if (nx < 0 || nx >= rooms_x || ny < 0 || ny >= rooms_y) continue;
      if (!room_visited(nx, ny)) options[n_options++] = dir;
    }
    if (n_options == 0) {
      stack.pop_back();
      continue;
    }
    const int dir = options[rng.below(static_cast<std::uint64_t>(n_options))];
    const int nx = room.x + kDx[dir];
    const int ny = room.y + kDy[dir];
    room_visited(nx, ny) = 1;
    // knock out the wall between the two rooms, then the room itself
    carve(1 + room.x * 2 + kDx[dir], 1 + room.y * 2 + kDy[dir]);
    carve(1 + nx * 2, 1 + ny * 2);
    stack.push_back({nx, ny});
  }

  carve(0, 1);                       // start
  carve(width - 1, height - 2);      // goal
  return grid;
}

/// A* shortest path between arbitrary corridor cells. Unit step costs,
/// Manhattan heuristic, ties broken by lower f then lower h then insertion
/// order, so paths are reproducible. Throws when the goal is unreachable.
inline std::vector<Cell> astar_solve(const MazeGrid& grid, Cell start, Cell goal) {
  if (!grid.in_bounds(start.x, start.y) || grid.is_wall(start.x, start.y) ||
      !grid.in_bounds(goal.x, goal.y) || grid.is_wall(goal.x, goal.y)) {
    throw std::invalid_argument("astar_solve: start/goal must be corridor cells");
  }
  const auto index = [&](Cell c) { return static_cast<std::size_t>(c.y) * grid.width + c.x; };
  if (start == goal) return {start};

  struct Entry {
    int f;
    int h;
    std::uint64_t order;
    std::size_t cell;
  };
  auto worse = [](const Entry& a, const Entry& b) {
    if (a.f != b.f) return a.f > b.f;
    if (a.h != b.h) return a.h > b.h;
    return a.order > b.order;
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> open(worse);

  const std::size_t n = grid.cells.size();
  std::vector<int> best_g(n, std::numeric_limits<int>::max());
  std::vector<std::size_t> parent(n, n);
  std::vector<std::uint8_t> closed(n, 0);
  auto heuristic = [&](Cell c) { return std::abs(c.x - goal.x) + std::abs(c.y - goal.y); };

  std::uint64_t counter = 0;
  best_g[index(start)] = 0;
  open.push({heuristic(start), heuristic(start), counter++, index(start)});
  constexpr int kDx[4] = {-1, 1, 0, 0};
  constexpr int kDy[4] = {0, 0, -1, 1};

  while (!open.empty()) {
    const Entry top = open.top();
    open.pop();
    if (closed[top.cell]) continue;
    closed[top.cell] = 1;
    const Cell here{static_cast<int>(top.cell % grid.width),
                    static_cast<int>(top.cell / grid.width)};
    if (here == goal) {
      std::vector<Cell> path;
      for (std::size_t c = top.cell; c != n; c = parent[c]) {
        path.push_back({static_cast<int>(c % grid.width), static_cast<int>(c / grid.width)});
      }
      std::reverse(path.begin(), path.end());
      return path;
    }
    const int g = best_g[top.cell];
    for (int dir = 0; dir < 4; ++dir) {
      const int nx = here.x + kDx[dir];
      const int ny = here.y + kDy[dir];
      if (!grid.in_bounds(nx, ny) || grid.is_wall(nx, ny)) continue;
      const std::size_t ni = static_cast<std::size_t>(ny) * grid.width + nx;
      if (closed[ni]) continue;
      const int tentative = g + 1;
      if (tentative < best_g[ni]) {
        best_g[ni] = tentative;
        parent[ni] = top.cell;
        const int h = heuristic({nx, ny});
        open.push({tentative + h, h, counter++, ni});
      }
    }
  }
  throw std::runtime_error("astar_solve: goal unreachable from start");
}

inline std::vector<Cell> astar_solve(const MazeGrid& grid) {
  return astar_solve(grid, grid.start(), grid.goal());
}

struct EnvState {
  Cell pos;
  int step_count = 0;
  bool done = false;
};

inline EnvState initial_state(const MazeGrid& grid) { return {grid.start(), 0, false}; }

/// Advances the environment one step and returns the reward. Walking into a
/// wall or out of bounds leaves the position unchanged but still costs a
/// step. Episodes end on the goal or after kMaxSteps moves.
inline double env_step(const MazeGrid& grid, EnvState& state, Action action) {
  if (state.done) throw std::logic_error("env_step: episode already finished");
  const Cell d = action_delta(action);
  const int nx = state.pos.x + d.x;
  const int ny = state.pos.y + d.y;
  if (grid.in_bounds(nx, ny) && !grid.is_wall(nx, ny)) state.pos = {nx, ny};
  state.step_count += 1;
  double reward = -0.1;
  if (state.pos == grid.goal()) {
    reward += 1.0;
    state.done = true;
  } else if (state.step_count >= static_cast<int>(kMaxSteps)) {
    state.done = true;
  }
  return reward;
}

/// Raised when an optimal path needs more moves than the episode horizon;
/// callers resample the seed instead of truncating the expert.
struct ExpertPathTooLong : std::runtime_error {
  explicit ExpertPathTooLong(std::size_t moves)
      : std::runtime_error("expert path needs " + std::to_string(moves) + " moves, limit is " +
                           std::to_string(kMaxSteps)) {}
};

/// Replays the A* solution through the environment to produce the labeled
/// expert trajectory (states, actions, rewards, returns-to-go).
inline Trajectory expert_trajectory(const MazeGrid& grid) {
  const auto path = astar_solve(grid);
  const std::size_t moves = path.size() - 1;
  if (moves > kMaxSteps) throw ExpertPathTooLong(moves);
  if (moves == 0) throw std::invalid_argument("expert_trajectory: start equals goal");

  Trajectory traj;
  traj.states.reserve(moves);
  traj.actions.reserve(moves);
  traj.rewards.reserve(moves);
  EnvState state = initial_state(grid);
  for (std::size_t i = 0; i < moves; ++i) {
    traj.states.push_back({static_cast<double>(path[i].x), static_cast<double>(path[i].y)});
    const Action a = move_direction(path[i], path[i + 1]);
    traj.actions.push_back(static_cast<int>(a));
    traj.rewards.push_back(env_step(grid, state, a));
  }
  if (!state.done || !(state.pos == grid.goal())) {
    throw std::logic_error("expert_trajectory: replay did not reach the goal");
  }
  traj.returns_to_go = returns_to_go(traj.rewards);
  return traj;
}

}  // namespace sdt
