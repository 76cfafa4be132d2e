"""Check the package's key-length formula against the mpmath oracle.

The oracle runs in its own interpreter so nothing is shared but the inputs.

    python scripts/key_length_golden.py
"""

import re
import subprocess
import sys
from pathlib import Path

from dayqkd.decoy import DecoyCounts, KeyBudget, key_length

ORACLE = Path(__file__).resolve().parents[1] / "tests" / "oracles" / "key_length_golden.py"


def main() -> int:
    res = subprocess.run([sys.executable, str(ORACLE)], capture_output=True, text=True, check=True)
    print(res.stdout, end="")
    oracle = int(re.search(r"^l = (\d+)$", res.stdout, re.M).group(1))
    budget = KeyBudget(s_z0_low=1e4, s_z1_low=5e7, phi_z_up=0.01)
    ours = key_length(budget, DecoyCounts(n_z_mu1=10 ** 8, m_z_mu1=5 * 10 ** 5), f_ec=1.06)
    print(f"package l = {ours.l}  (lambda_EC {ours.lambda_ec:.3f})")
    ok = ours.l == oracle
    print("MATCH" if ok else "MISMATCH")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
