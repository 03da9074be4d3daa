from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
SMOKE_CFG = ROOT / "configs" / "smoke.cfg"
DESK_CFG = ROOT / "configs" / "desk.cfg"

from dadmls.perf import tune_allocator

tune_allocator()
