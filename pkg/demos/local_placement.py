"""Place a cropped, moved fragment back into its parent map with masked search.

Run with ``python3 demos/local_placement.py [seed] [volume_ratio]``.
"""

import sys

from mapalign.local_align import align_local, volume_ratio
from mapalign.pipeline import RunConfig
from mapalign.pointcloud import sample_grid
from mapalign.scoring import rmsd_vs_ground_truth
from mapalign.synthetic import cropped_pair

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
ratio = float(sys.argv[2]) if len(sys.argv) > 2 else 0.3
fx = cropped_pair(seed, volume_ratio=ratio)
print(f"fragment {fx.source.dims} inside {fx.target.dims}, volume ratio {volume_ratio(fx.source, fx.target):.2f}")

config = RunConfig(sampling_interval=2.0)
candidates = align_local(fx.source, fx.target, config)
ref = sample_grid(fx.source, config.sampling_interval).points
for c in candidates:
    rmsd = rmsd_vs_ground_truth(c.transform, fx.truth, ref).rmsd
    print(f"rank {c.rank}: score {c.score.score:.3f}  RMSD {rmsd:6.2f} A  window {c.lattice_index}")
