#include "mergerl/types.hpp"

#include <cmath>

namespace mergerl {

std::string_view to_string(Side s) {
  return s == Side::Left ? "left" : "right";
}

bool TrajectoryPlan::all_finite() const {
  for (const Point& p : points)
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) return false;
  return true;
}

char to_char(Label l) {
  switch (l) {
    case Label::GiveWay: return 'g';
    case Label::TakeWay: return 't';
    case Label::Offset: return 'o';
  }
  return '?';
}

double AgnosticState::longitudinal_speed() const {
  return ego_speed * std::cos(ego_heading);
}

}  // namespace mergerl
