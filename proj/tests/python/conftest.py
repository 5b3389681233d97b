import sys
from pathlib import Path

# Make the in-tree layout importable without an install: the pure package
# lives in python/, the compiled module in the CMake build directory.
_root = Path(__file__).resolve().parents[2]
for p in (_root / "python", _root / "build"):
    if p.is_dir() and str(p) not in sys.path:
        sys.path.insert(0, str(p))
