#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "mssm/mask.hpp"
#include "mssm/ops.hpp"
#include "mssm/ssm.hpp"

// Masked selective-scan unit: drop tokens outside the control region, scan the
// survivors together with the control tokens, then paste the results back into
// the original sequence. Tokens outside the region come out bit-identical to
// the input, whatever the control embedding says.
namespace mssm {

inline std::vector<std::int64_t> kept_indices(const std::vector<std::uint8_t>& keep) {
  std::vector<std::int64_t> idx;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) idx.push_back(static_cast<std::int64_t>(i));
  }
  if (idx.empty()) throw std::invalid_argument("mask_drop: keep set is empty");
  return idx;
}

// z_prime = [identity tokens; content tokens]. Identity tokens always pass
// through; keep applies to the content tokens and preserves relative order.
inline Var mask_drop(const Var& z_prime, const std::vector<std::uint8_t>& keep,
                     std::int64_t n_identity) {
  const std::int64_t total = z_prime.value().dim(0);
  const std::int64_t content = total - n_identity;
  if (n_identity < 0 || content < 0 ||
      content != static_cast<std::int64_t>(keep.size())) {
    throw std::invalid_argument("mask_drop: keep flags do not match the content token count");
  }
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < n_identity; ++i) idx.push_back(i);
  for (std::int64_t i : kept_indices(keep)) idx.push_back(n_identity + i);
  return gather_tokens(z_prime, std::move(idx));
}

// Writes scan outputs back into exactly the kept content positions of z.
inline Var mask_paste(const Var& z, const Var& y_content,
                      const std::vector<std::int64_t>& content_idx) {
  return scatter_tokens(z, y_content, content_idx);
}

// The sequence actually scanned: [identity; kept content; control tokens].
// Its length is n_identity + frames * mask_ones + control token count.
inline Var build_scan_input(const Var& z_prime, const std::vector<std::uint8_t>& keep,
                            std::int64_t n_identity, const Var& e_ctl) {
  Var kept = mask_drop(z_prime, keep, n_identity);
  return concat_tokens({kept, e_ctl});
}

// One branch of the control layer, end to end:
//   z       flattened volume, (tokens, C)
//   z_prime identity-concatenated features, (1 + tokens, C)
//   e_ctl   control tokens already projected to C channels, (frames, C)
inline Var mask_ssm_forward(const Var& z, const Var& z_prime, const ControlMask& m,
                            const Var& e_ctl, const SsmVars& fwd, const SsmVars& bwd,
                            const TokenLayout& layout) {
  if (z.value().rank() != 2 || z.value().dim(0) != layout.tokens()) {
    throw std::invalid_argument("mask_ssm_forward: z does not match the layout");
  }
  const std::int64_t c = z.value().dim(1);
  if (z_prime.value().dim(1) != c || e_ctl.value().dim(1) != c) {
    throw std::invalid_argument("mask_ssm_forward: channel mismatch");
  }
  const std::int64_t n_identity = z_prime.value().dim(0) - layout.tokens();
  if (n_identity < 1) {
    throw std::invalid_argument("mask_ssm_forward: z_prime lacks identity tokens");
  }
  const std::vector<std::uint8_t> keep = broadcast_mask(m, layout);
  const std::vector<std::int64_t> idx = kept_indices(keep);

  Var scan_in = build_scan_input(z_prime, keep, n_identity, e_ctl);
  Var y = ssm_bidirectional(scan_in, fwd, bwd);

  // strip identity and control positions, keep the content outputs
  std::vector<std::int64_t> content_rows(idx.size());
  std::iota(content_rows.begin(), content_rows.end(), n_identity);
  Var y_content = gather_tokens(y, std::move(content_rows));

  return mask_paste(z, y_content, idx);
}

}  // namespace mssm
