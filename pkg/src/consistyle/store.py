"""On-disk store of vanilla-pass self-attention values, keyed by (step, layer, image)."""
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import ArtifactError
from .tensor import FeatureTensor

INDEX = "index.tsv"


def _fname(step, layer, image):
    return f"step{step:03d}_{layer}_img{image}.csty"


class ValueStore:
    """Write-once map ``(step, layer_id, image) -> FeatureTensor``.

    Each tensor is ``(2, N, d)``: the unguided half's V, then the guided half's.
    """

    def __init__(self, window, layer, grid):
        self.window = window
        self.layer = layer
        self.grid = tuple(grid)
        self._data = {}

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return key in self._data

    def keys(self):
        return sorted(self._data)

    def put(self, step, layer, image, value):
        key = (int(step), str(layer), int(image))
        if step not in self.window or layer != self.layer:
            raise KeyError(f"store key {key} outside window {self.window} / layer {self.layer}")
        if key in self._data:
            raise KeyError(f"store key {key} already written")
        self._data[key] = value if isinstance(value, FeatureTensor) else FeatureTensor(value, self.grid)

    def get(self, step, layer, image):
        return self._data[(int(step), str(layer), int(image))]

    def save(self, root):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        lines = [f"# window\t{self.window.lo}\t{self.window.hi}\n",
                 f"# layer\t{self.layer}\n",
                 f"# grid\t{self.grid[0]}\t{self.grid[1]}\n",
                 "step\tlayer\timage\tpath\n"]
        for step, layer, image in self.keys():
            name = _fname(step, layer, image)
            tensorio.save(root / name, self._data[(step, layer, image)].data)
            lines.append(f"{step}\t{layer}\t{image}\t{name}\n")
        (root / INDEX).write_text("".join(lines))

    @classmethod
    def load(cls, root):
        from .schemes import StepWindow

        root = Path(root)
        path = root / INDEX
        try:
            text = path.read_text()
        except OSError as exc:
            raise ArtifactError(path, 0, f"unreadable ({exc.strerror})") from exc
        meta, rows, offset = {}, [], 0
        for line in text.splitlines(keepends=True):
            parts = line.rstrip("\n").split("\t")
            if parts[0].startswith("#"):
                meta[parts[0][1:].strip()] = parts[1:]
            elif parts[0] != "step":
                if len(parts) != 4:
                    raise ArtifactError(path, offset, "store index row needs 4 fields")
                rows.append((offset, parts))
            offset += len(line.encode())
        try:
            window = StepWindow(int(meta["window"][0]), int(meta["window"][1]))
            grid = (int(meta["grid"][0]), int(meta["grid"][1]))
            store = cls(window, meta["layer"][0], grid)
            for off, (step, layer, image, name) in rows:
                store.put(int(step), layer, int(image), tensorio.load(root / name))
        except (KeyError, ValueError, IndexError) as exc:
            raise ArtifactError(path, 0, f"malformed store index ({exc})") from exc
        return store

    def equals(self, other):
        if self.keys() != other.keys():
            return False
        return all(np.array_equal(self._data[k].data, other._data[k].data) for k in self.keys())
