// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace lorasr {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point of the `lorasr` tool. `args` excludes the program name.
///
///     train     --config cfg --out ckpt [--resume ckpt]
///     finalize  --student ckpt --pretrained ckpt [--beta b] [--ema] --out ckpt
///     eval      --model ckpt --dataset dir [--channel y|rgb] [--crop n] [--json path]
///     sr        --model ckpt --input png --output png
///     init      --out ckpt [--channels c] [--blocks n] [--scale s] [--seed k]
///               [--dataset dir --iters n --patch p --batch b --lr f]
///     synth     --out dir [--count n] [--size px] [--seed k]
///
/// Returns 0 on success, 1 for usage or configuration errors, 2 for runtime
/// failures.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lorasr
