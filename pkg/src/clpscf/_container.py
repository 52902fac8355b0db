"""Single-file container: format tag line, JSON header, raw array blobs."""

import json
from pathlib import Path

import numpy as np

_MAGIC = b"CLPSCF"


def write_container(path, fmt: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    index = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format": fmt, "meta": meta, "arrays": index},
                        sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + b" " + fmt.encode() + b"\n")
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path, fmt: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        tag = fh.readline().rstrip(b"\n")
        if tag != _MAGIC + b" " + fmt.encode():
            raise ValueError(f"{path}: not a {fmt} file (tag {tag!r})")
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size))
        body = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        start = entry["offset"]
        buf = body[start:start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]).copy()
    return header["meta"], arrays
