#include "da/grl.hpp"

namespace da::ops {

Var gradient_reversal(Var x, double scale) {
  if (scale < 0.0) {
    throw ValueError("gradient_reversal: scale must be non-negative, got " +
                     std::to_string(scale));
  }
  Tape& t = *x.tape;
  Tensor out = x.value();
  if (!t.requires_grad(x.id)) return t.leaf(std::move(out), false);
  const int xid = x.id;
  return t.record(std::move(out), true, [xid, scale](Tape& t, const Tape::Node& self) {
    t.accumulate(xid, self.grad.array() * (-scale));
  });
}

}  // namespace da::ops
