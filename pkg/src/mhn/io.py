"""File formats: T4F1 tensors, weight stores, architecture text, KITTI labels,
detection dumps and run configs.

All text is UTF-8 with LF line endings.  Binary data is little-endian.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .anchors import AnchorConfig
from .archgraph import ArchGraph, Head, NodeSpec, RcnnHead
from .builders import ARCHITECTURES, BackboneSpec, toy_backbone
from .detect import Detection
from .errors import MalformedLine, MHNError
from .evaluation import GroundTruthBox
from .tensor_engine import WeightStore

TENSOR_MAGIC = b"T4F1"
WEIGHTS_MAGIC = b"T4WS"

# ----------------------------------------------------------------- tensors


def tensor_to_bytes(x) -> bytes:
    x = np.asarray(x, dtype="<f4")
    if x.ndim != 4:
        raise MHNError(f"T4F1 holds 4-D tensors, got shape {x.shape}")
    return TENSOR_MAGIC + struct.pack("<4I", *x.shape) + np.ascontiguousarray(x).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (tensor, next offset)."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise MHNError("bad tensor magic, expected T4F1")
    dims = struct.unpack_from("<4I", buf, offset + 4)
    start = offset + 20
    count = int(np.prod(dims))
    end = start + 4 * count
    if end > len(buf):
        raise MHNError(f"truncated tensor: need {end - start} bytes of data, have {len(buf) - start}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(dims)
    if not np.isfinite(data).all():
        raise MHNError("tensor contains non-finite values")
    return data.astype(np.float32), end


def save_tensor(path, x) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    x, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise MHNError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return x


def save_weights(path, store: WeightStore) -> None:
    parts = [WEIGHTS_MAGIC, struct.pack("<I", len(store))]
    for key in store.keys():
        kernel, bias = store[key]
        name = key.encode("utf-8")
        parts += [struct.pack("<I", len(name)), name, tensor_to_bytes(kernel),
                  tensor_to_bytes(bias.reshape(1, 1, 1, -1))]
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> WeightStore:
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise MHNError(f"{path}: bad weight-store magic")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    store = WeightStore()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4:pos + 4 + n].decode("utf-8")
        kernel, pos = tensor_from_bytes(buf, pos + 4 + n)
        bias, pos = tensor_from_bytes(buf, pos)
        store[name] = (kernel, bias.reshape(-1))
    if pos != len(buf):
        raise MHNError(f"{path}: trailing bytes after {count} weight records")
    return store

# ------------------------------------------------------- architecture text
#
#   # comment
#   arch mhn
#   input_channels 3
#   node <id> <op> [in=a,b] [kernel=KHxKW] [stride=S] [dilation=D] [pad=PHxPW] [out=C] [share=G]
#   output <name>
#   alias <name> <target>
#   head <branch> mid=<id> cls=<id> reg=<id> anchors=<A>
#   rcnn source=<name> roi=OHxOW fc=<width> cls=<id> reg=<id>
#   begin rcnn ... end rcnn       (the head's own graph, same grammar)


def _pair_str(p):
    return f"{p[0]}x{p[1]}"


def _parse_pair(s, lineno):
    try:
        a, b = s.split("x")
        return int(a), int(b)
    except ValueError:
        raise MalformedLine(lineno, f"expected AxB, got {s!r}") from None


def graph_to_text(g: ArchGraph) -> str:
    lines = [f"arch {g.name or '-'}", f"input_channels {g.input_channels}"]
    for n in g.nodes:
        parts = [f"node {n.id} {n.op}"]
        if n.inputs:
            parts.append("in=" + ",".join(n.inputs))
        if n.op in ("Conv", "Pool"):
            parts.append(f"kernel={_pair_str(n.kernel)}")
            parts.append(f"stride={n.stride}")
            parts.append(f"pad={_pair_str(n.padding)}")
        if n.op == "Conv":
            parts.append(f"dilation={n.dilation}")
            parts.append(f"out={n.out_channels}")
        if n.share_group:
            parts.append(f"share={n.share_group}")
        lines.append(" ".join(parts))
    lines += [f"output {o}" for o in g.outputs]
    lines += [f"alias {k} {v}" for k, v in g.aliases.items()]
    lines += [f"head {h.branch} mid={h.mid} cls={h.cls} reg={h.reg} anchors={h.anchors}" for h in g.heads]
    if g.rcnn is not None:
        r = g.rcnn
        lines.append(f"rcnn source={r.source} roi={_pair_str(r.roi_size)} fc={r.fc_width} cls={r.cls} reg={r.reg}")
        lines.append("begin rcnn")
        lines += graph_to_text(r.graph).rstrip("\n").split("\n")
        lines.append("end rcnn")
    return "\n".join(lines) + "\n"


def _kv(tokens, lineno):
    out = {}
    for t in tokens:
        if "=" not in t:
            raise MalformedLine(lineno, f"expected key=value, got {t!r}")
        k, v = t.split("=", 1)
        out[k] = v
    return out


def graph_from_text(text: str) -> ArchGraph:
    g, rest = _parse_graph(text.split("\n"), 0, top=True)
    return g


def _parse_graph(lines, start, top):
    name, in_ch = "", 3
    nodes, outputs, aliases, heads = [], [], {}, []
    rcnn_line = None
    rcnn_graph = None
    k = start
    while k < len(lines):
        lineno = k + 1
        raw = lines[k].split("#", 1)[0].strip()
        k += 1
        if not raw:
            continue
        tok = raw.split()
        kw = tok[0]
        try:
            if kw == "arch":
                name = "" if tok[1] == "-" else tok[1]
            elif kw == "input_channels":
                in_ch = int(tok[1])
            elif kw == "node":
                nid, op = tok[1], tok[2]
                kv = _kv(tok[3:], lineno)
                nodes.append(NodeSpec(
                    nid, op,
                    tuple(kv["in"].split(",")) if kv.get("in") else (),
                    kernel=_parse_pair(kv["kernel"], lineno) if "kernel" in kv else (1, 1),
                    stride=int(kv.get("stride", 1)),
                    dilation=int(kv.get("dilation", 1)),
                    padding=_parse_pair(kv["pad"], lineno) if "pad" in kv else (0, 0),
                    out_channels=int(kv["out"]) if "out" in kv else None,
                    share_group=kv.get("share"),
                ))
            elif kw == "output":
                outputs.append(tok[1])
            elif kw == "alias":
                aliases[tok[1]] = tok[2]
            elif kw == "head":
                kv = _kv(tok[2:], lineno)
                heads.append(Head(tok[1], kv["mid"], kv["cls"], kv["reg"], int(kv["anchors"])))
            elif kw == "rcnn" and top:
                rcnn_line = (_kv(tok[1:], lineno), lineno)
            elif kw == "begin" and tok[1:] == ["rcnn"] and top:
                rcnn_graph, k = _parse_graph(lines, k, top=False)
            elif kw == "end" and tok[1:] == ["rcnn"] and not top:
                break
            else:
                raise MalformedLine(lineno, f"unknown directive {kw!r}")
        except (IndexError, KeyError, ValueError) as exc:
            raise MalformedLine(lineno, f"cannot parse {raw!r}: {exc}") from None
    else:
        if not top:
            raise MalformedLine(len(lines), "missing 'end rcnn'")
    rcnn = None
    if rcnn_line is not None:
        kv, lineno = rcnn_line
        if rcnn_graph is None:
            raise MalformedLine(lineno, "rcnn directive without a 'begin rcnn' block")
        rcnn = RcnnHead(kv["source"], _parse_pair(kv["roi"], lineno), int(kv["fc"]), rcnn_graph, kv["cls"], kv["reg"])
    g = ArchGraph(tuple(nodes), tuple(outputs), in_ch, aliases, tuple(heads), rcnn, name)
    return g, k


def save_graph(path, g: ArchGraph) -> None:
    Path(path).write_text(graph_to_text(g), encoding="utf-8")


def load_graph(path) -> ArchGraph:
    return graph_from_text(Path(path).read_text(encoding="utf-8"))

# ------------------------------------------------------------ annotations


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    label: str
    truncation: float
    occlusion: int
    box: tuple[float, float, float, float]

    @property
    def is_ignore(self) -> bool:
        return self.label in IGNORE_LABELS


POSITIVE_LABELS = ("Pedestrian",)
IGNORE_LABELS = ("DontCare", "Person_sitting")


def parse_kitti_labels(text: str, image_id: str = "") -> list[AnnotationRecord]:
    """KITTI label lines: type, truncated, occluded, alpha, bbox(4), dims(3), loc(3), rot_y[, score]."""
    records = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) < 15:
            raise MalformedLine(lineno, f"expected at least 15 fields, got {len(tok)}")
        try:
            trunc, occ = float(tok[1]), int(float(tok[2]))
            box = tuple(float(v) for v in tok[4:8])
        except ValueError as exc:
            raise MalformedLine(lineno, str(exc)) from None
        if not all(math.isfinite(v) for v in box):
            raise MalformedLine(lineno, "non-finite box coordinate")
        if box[3] <= box[1] and tok[0] != "DontCare":
            raise MalformedLine(lineno, f"box height must be positive, got {box}")
        records.append(AnnotationRecord(image_id, tok[0], trunc, occ, box))
    return records


def write_kitti_labels(records) -> str:
    lines = []
    for r in records:
        x1, y1, x2, y2 = r.box
        lines.append(
            f"{r.label} {r.truncation:.2f} {r.occlusion} -10 {x1:.2f} {y1:.2f} {x2:.2f} {y2:.2f} "
            "-1 -1 -1 -1000 -1000 -1000 -10"
        )
    return "".join(line + "\n" for line in lines)


def records_to_gt(records) -> list[GroundTruthBox]:
    """Keep pedestrians (active) and ignore-class boxes; drop other classes."""
    out = []
    for r in records:
        if r.label in POSITIVE_LABELS:
            out.append(GroundTruthBox(r.box, False, r.occlusion))
        elif r.is_ignore and r.box[3] > r.box[1] and r.box[2] > r.box[0]:
            out.append(GroundTruthBox(r.box, True, r.occlusion))
    return out


def load_ground_truth(path) -> dict[str, list[GroundTruthBox]]:
    """A directory of ``<image_id>.txt`` KITTI files, or one file whose lines
    are ``<image_id> <KITTI label fields>``."""
    path = Path(path)
    by_image: dict[str, list[GroundTruthBox]] = {}
    if path.is_dir():
        for f in sorted(path.glob("*.txt")):
            by_image[f.stem] = records_to_gt(parse_kitti_labels(f.read_text(encoding="utf-8"), f.stem))
        return by_image
    for lineno, line in enumerate(path.read_text(encoding="utf-8").split("\n"), start=1):
        tok = line.split(None, 1)
        if not tok:
            continue
        if len(tok) < 2:
            raise MalformedLine(lineno, "missing label fields after image id")
        try:
            recs = parse_kitti_labels(tok[1], tok[0])
        except MalformedLine as exc:
            raise MalformedLine(lineno, str(exc).split(": ", 1)[1]) from None
        by_image.setdefault(tok[0], []).extend(records_to_gt(recs))
    return by_image

# ------------------------------------------------------------- detections


def format_detection(image_id: str, d: Detection) -> str:
    x1, y1, x2, y2 = d.box
    return (f"{image_id} {x1:.6f} {y1:.6f} {x2:.6f} {y2:.6f} "
            f"{d.s_f:.6f} {d.s_rcnn:.6f} {d.s_mhn:.6f} {d.branch}")


def write_detections(path, rows) -> None:
    """``rows`` is an iterable of (image_id, Detection)."""
    text = "".join(format_detection(img, d) + "\n" for img, d in rows)
    Path(path).write_text(text, encoding="utf-8")


def parse_detections(text: str) -> list[tuple[str, Detection]]:
    rows = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) != 9:
            raise MalformedLine(lineno, f"expected 9 fields, got {len(tok)}")
        try:
            x1, y1, x2, y2, s_f, s_rcnn, s_mhn = (float(v) for v in tok[1:8])
            branch = int(tok[8])
        except ValueError as exc:
            raise MalformedLine(lineno, str(exc)) from None
        rows.append((tok[0], Detection((x1, y1, x2, y2), s_rcnn, s_mhn, s_f, branch=branch)))
    return rows


def load_detections(path) -> list[tuple[str, Detection]]:
    return parse_detections(Path(path).read_text(encoding="utf-8"))

# ------------------------------------------------------------- run config


@dataclass
class RunConfig:
    arch: str = "mhn"
    backbone: BackboneSpec = field(default_factory=toy_backbone)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    lam: float = 0.5
    nms_iou: float = 0.5
    max_out: int = 100
    top_k: int = 200
    seed: int = 17
    weights: str | None = None
    input: str | None = None
    out: str | None = None

    def check(self, base: Path | None = None) -> None:
        if self.arch not in ARCHITECTURES:
            raise MHNError(f"unknown arch {self.arch!r}")
        self.backbone.check()
        self.anchors.check()
        if self.lam < 0:
            raise MHNError("lam must be non-negative")
        if not 0 < self.nms_iou < 1:
            raise MHNError("nms_iou must lie in (0, 1)")
        if self.max_out < 1 or self.top_k < 1:
            raise MHNError("max_out and top_k must be positive")
        for name in ("weights", "input"):
            p = getattr(self, name)
            if p is not None and not (Path(base or ".") / p).exists():
                raise MHNError(f"{name} path {p!r} does not exist")


def config_to_json(cfg: RunConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n"


def config_from_json(text: str) -> RunConfig:
    raw = json.loads(text)
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise MHNError(f"unknown config keys: {sorted(unknown)}")
    if "backbone" in raw:
        raw["backbone"] = backbone_from_dict(raw["backbone"])
    if "anchors" in raw:
        a = dict(raw["anchors"])
        a["branch_split"] = tuple(a.get("branch_split", (3, 3, 3)))
        raw["anchors"] = AnchorConfig(**a)
    return RunConfig(**raw)


def backbone_from_dict(d) -> BackboneSpec:
    d = dict(d)
    d["blocks"] = tuple(tuple(int(v) for v in b) for b in d["blocks"])
    if "kernel" in d:
        d["kernel"] = tuple(d["kernel"])
    return BackboneSpec(**d)


def load_config(path) -> RunConfig:
    path = Path(path)
    cfg = config_from_json(path.read_text(encoding="utf-8"))
    cfg.check(path.parent)
    return cfg


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(config_to_json(cfg), encoding="utf-8")
