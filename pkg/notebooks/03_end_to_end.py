# %% Whole pipeline on the default configuration, everything written under runs/default
import sys
from pathlib import Path

from exploregs.config import PipelineConfig, format_config
from exploregs.pipeline import read_metrics, run_pipeline

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/default")
cfg = PipelineConfig()
print(format_config(cfg))

report = run_pipeline(cfg, out)
print(report.to_text())

# %% per-frame quality
for fid, p, b in read_metrics(out / "metrics.txt"):
    print(f"frame {fid:3d}: {p:6.2f} dB  (mean colour {b:6.2f} dB, margin {p - b:+.2f})")
print("outputs:", sorted(x.name for x in out.iterdir()))
