import hashlib
from pathlib import Path


def tree_hashes(root):
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


# one line per acceptance criterion, echoed in the pytest terminal summary
CRITERIA = {}


def criterion(number, title, ok, detail=""):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    CRITERIA[number] = line
    print(line)
    assert ok, line
