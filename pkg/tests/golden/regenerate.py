"""Rewrite the golden files. Run only after verifying a behaviour change.

    python3 tests/golden/regenerate.py
"""

import json
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent))

from corematch import criteria as cr  # noqa: E402
from corematch.engine import SparsityParams, generate  # noqa: E402
from corematch.model import TOY_CONFIG, forward_dense, init_synthetic  # noqa: E402
from corematch.sparsity import to_csv  # noqa: E402
from corematch.synth import synthetic_vlm_prompt  # noqa: E402
from test_model import GOLDEN_PROMPT  # noqa: E402


def main() -> None:
    w = init_synthetic(TOY_CONFIG, seed=7)
    logits, trace = forward_dense(w, GOLDEN_PROMPT)
    np.save(HERE / "toy_logits.npy", logits)

    scores = cr.attention_criterion(trace, 2)
    rows = [(2, i, f"{s:.15e}") for i, s in enumerate(scores)]
    (HERE / "toy_attention_criterion.csv").write_text(to_csv(rows, ("layer", "token", "score")))

    prompt, _ = synthetic_vlm_prompt(w, seed=0)
    res = generate(w, prompt, SparsityParams(), max_new_tokens=8)
    out = {"tokens": res.tokens, "reports": res.reports, "cost": res.cost.to_dict()}
    (HERE / "toy_generation.json").write_text(json.dumps(cr._jsonable(out), indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
