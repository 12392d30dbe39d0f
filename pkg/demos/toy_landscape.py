"""Train each critic objective on the 2-D disc task and compare the learned Q landscapes.

    python3 demos/toy_landscape.py [out_dir]

Writes field/path/trace CSVs plus SVG plots per objective and prints how many of
the eight ring starts climb into the success disc under gradient ascent.
"""
import sys

import numpy as np

from rankq.toy import OBJECTIVES, ToyConfig, train_toy, write_artifacts

out = sys.argv[1] if len(sys.argv) > 1 else "toy_out"
peaks = {}
for objective in OBJECTIVES:
    res = train_toy(ToyConfig(objective=objective))
    write_artifacts(res, out)
    peaks[objective] = res.column("dqda_max")
    last = res.trace[-1]
    print(f"{objective:6s} converged {res.converged()}/8  Q succ {last['q_succ']:+.2f}  "
          f"Q fail {last['q_fail']:+.2f}  Q off-support {last['q_ood']:+.2f}  max|dQ/da| {peaks[objective].max():.1f}")

k = int(np.argmax(peaks["cql"]))
print(f"CQL peak |dQ/da| is {peaks['cql'][k] / peaks['rankq'][k]:.1f}x RankQ's at the same checkpoint")
print(f"artifacts in {out}/")
