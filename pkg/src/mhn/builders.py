"""Constructors for the multi-branch networks and their prediction heads.

Block numbering is 1-based: ``split_block_index = i`` names block ``conv(i)``.
Blocks ``conv1 .. conv(i-2)`` form the shared trunk with a 2x2 pool after
each block; blocks after ``conv(i)`` are ignored.  Node ids follow the block
names (``conv4_2``, ``conv5s_1``, ``conv6m_2``, ``pool4`` ...), and the three
pre-fusion branch maps are always reachable as ``bran-s``, ``bran-m`` and
``bran-l`` (``feat-s``/``feat-m``/``feat-l`` are aliases for the same maps).
"""
from __future__ import annotations

from dataclasses import dataclass

from .archgraph import (
    ADD, BRANCHES, CONV, INPUT, POOL, RELU, UPSAMPLE,
    ArchGraph, Head, NodeSpec, RcnnHead, infer_signatures,
)
from .errors import InvalidBackbone, NoOutputs

ARCHITECTURES = ("mhn-noskip", "mhn", "mhn-d")


@dataclass(frozen=True)
class BackboneSpec:
    blocks: tuple[tuple[int, int], ...]
    split_block_index: int
    kernel: tuple[int, int] = (3, 3)
    input_channels: int = 3
    # Output width of the 1x1 lateral convs in the skip connections; None keeps
    # the branch width.
    lateral_channels: int | None = None

    def check(self) -> None:
        i = self.split_block_index
        if not 3 <= i <= len(self.blocks):
            raise InvalidBackbone(
                f"split_block_index {i} out of range [3, {len(self.blocks)}]"
            )
        if self.input_channels < 1:
            raise InvalidBackbone("input_channels must be positive")
        if min(self.kernel) < 1:
            raise InvalidBackbone(f"bad kernel {self.kernel}")
        used = self.blocks[:i]
        for k, (convs, ch) in enumerate(used, start=1):
            if convs < 1 or ch < 1:
                raise InvalidBackbone(f"block {k}: convs and channels must be positive")
        chans = [ch for _, ch in used]
        if any(b < a for a, b in zip(chans, chans[1:])):
            raise InvalidBackbone(f"channels must be non-decreasing up to the split: {chans}")
        if len(set(chans[-3:])) != 1:
            # conv(i)s + conv(i-2) and conv(i)m + conv(i-1) are element-wise sums.
            raise InvalidBackbone(
                f"conv{i - 2}, conv{i - 1}, conv{i} must have equal channels, got {chans[-3:]}"
            )
        if self.lateral_channels is not None and self.lateral_channels < 1:
            raise InvalidBackbone("lateral_channels must be positive")


@dataclass(frozen=True)
class HeadSpec:
    anchors_per_branch: int = 3
    mid_channels: int | None = None
    mid_kernel: tuple[int, int] = (5, 3)

    def __post_init__(self):
        if tuple(self.mid_kernel) != (5, 3):
            raise ValueError("mid_kernel is fixed at (5, 3)")
        if self.anchors_per_branch < 1:
            raise ValueError("anchors_per_branch must be >= 1")

    @property
    def cls_channels(self) -> int:
        return 2 * self.anchors_per_branch

    @property
    def reg_channels(self) -> int:
        return 4 * self.anchors_per_branch


def vgg16_backbone() -> BackboneSpec:
    """VGG16 conv1-conv5 plus an extra conv6 block, split at conv6."""
    return BackboneSpec(((2, 64), (2, 128), (3, 256), (3, 512), (3, 512), (3, 512)), 6)


def toy_backbone() -> BackboneSpec:
    """Same topology as :func:`vgg16_backbone` at 1/8 width with thinner blocks."""
    return BackboneSpec(((1, 8), (1, 16), (2, 32), (2, 64), (2, 64), (2, 64)), 6)


class _Builder:
    def __init__(self):
        self.nodes: list[NodeSpec] = []

    def add(self, node: NodeSpec) -> str:
        self.nodes.append(node)
        return node.id

    def block(self, src, name, convs, channels, kernel, dilation=1, share=None):
        """``convs`` x (Conv + ReLU); returns the id of the last ReLU."""
        pad = tuple(dilation * (k - 1) // 2 for k in kernel)
        cur = src
        for j in range(1, convs + 1):
            group = f"{share}_{j}" if share else None
            cur = self.add(NodeSpec(
                f"{name}_{j}", CONV, (cur,), kernel=kernel, dilation=dilation,
                padding=pad, out_channels=channels, share_group=group,
            ))
            cur = self.add(NodeSpec(f"relu{name[4:]}_{j}", RELU, (cur,)))
        return cur

    def pool(self, src, name):
        return self.add(NodeSpec(name, POOL, (src,), kernel=(2, 2), stride=2))

    def graph(self, outputs, input_channels, aliases, name) -> ArchGraph:
        return ArchGraph(tuple(self.nodes), tuple(outputs), input_channels, dict(aliases), name=name)


def _branches(b: BackboneSpec, dilated: bool) -> tuple[_Builder, dict[str, str]]:
    b.check()
    i = b.split_block_index
    k = b.kernel
    bld = _Builder()
    cur = bld.add(NodeSpec("input", INPUT))
    for blk in range(1, i - 1):
        convs, ch = b.blocks[blk - 1]
        cur = bld.block(cur, f"conv{blk}", convs, ch, k)
        if blk < i - 2:
            cur = bld.pool(cur, f"pool{blk}")
    trunk = cur
    (n1, c1), (n2, c2) = b.blocks[i - 2], b.blocks[i - 1]
    d = 2 if dilated else 1

    # bran-s keeps full resolution and plain convolutions; in the dilated
    # variant its convs stop sharing columns with the dilated bran-m/bran-l.
    s_share1 = None if dilated else f"conv{i - 1}"
    s_share2 = None if dilated else f"conv{i}"
    s = bld.block(trunk, f"conv{i - 1}s", n1, c1, k, share=s_share1)
    s = bld.block(s, f"conv{i}s", n2, c2, k, share=s_share2)
    bld.add(NodeSpec("bran-s", ADD, (s, trunk)))

    mid_in = trunk if dilated else bld.pool(trunk, f"pool{i - 2}")
    c_prev = bld.block(mid_in, f"conv{i - 1}", n1, c1, k, dilation=d, share=f"conv{i - 1}")
    m = bld.block(c_prev, f"conv{i}m", n2, c2, k, dilation=d, share=f"conv{i}")
    bld.add(NodeSpec("bran-m", ADD, (m, c_prev)))

    l_in = bld.pool(c_prev, f"pool{i - 1}")
    last = bld.block(l_in, f"conv{i}", n2, c2, k, dilation=d, share=f"conv{i}")
    aliases = {
        "bran-l": last,
        "feat-s": "bran-s",
        "feat-m": "bran-m",
        "feat-l": "bran-l",
    }
    return bld, aliases


def build_mhn_noskip(b: BackboneSpec) -> ArchGraph:
    bld, aliases = _branches(b, dilated=False)
    aliases.update({"M4": "bran-s", "M5": "bran-m", "M6": "bran-l"})
    return bld.graph(BRANCHES, b.input_channels, aliases, "mhn-noskip")


def _fuse(bld: _Builder, aliases, b: BackboneSpec, name: str) -> ArchGraph:
    """Skip-layer fusion: 1x1 lateral conv, x2 bilinear upsample when the
    resolutions differ, element-wise sum."""
    lat = b.lateral_channels or b.blocks[b.split_block_index - 1][1]

    def stride_of(node_id):
        g = bld.graph(("input",), b.input_channels, aliases, name)
        return infer_signatures(g)[g.resolve(node_id)].stride

    def merge(coarse, fine, out_id, tag):
        top = bld.add(NodeSpec(f"lat-{tag}-top", CONV, (coarse,), out_channels=lat))
        if stride_of(coarse) != stride_of(fine):
            top = bld.add(NodeSpec(f"up-{tag}", UPSAMPLE, (top,)))
        side = bld.add(NodeSpec(f"lat-{tag}", CONV, (fine,), out_channels=lat))
        return bld.add(NodeSpec(out_id, ADD, (top, side)))

    merge(aliases["bran-l"], "bran-m", "feat-m-c", "m")
    merge("feat-m-c", "bran-s", "feat-s-c", "s")
    aliases.update({"M4": "feat-s-c", "M5": "feat-m-c", "M6": "feat-l"})
    return bld.graph(("feat-s-c", "feat-m-c", "feat-l"), b.input_channels, aliases, name)


def build_mhn(b: BackboneSpec) -> ArchGraph:
    bld, aliases = _branches(b, dilated=False)
    return _fuse(bld, aliases, b, "mhn")


def build_mhn_d(b: BackboneSpec) -> ArchGraph:
    """MHN without pool(i-2); conv(i-1), conv(i) and conv(i)m use dilation 2."""
    bld, aliases = _branches(b, dilated=True)
    return _fuse(bld, aliases, b, "mhn-d")


def build(arch: str, b: BackboneSpec | None = None) -> ArchGraph:
    b = b or toy_backbone()
    try:
        fn = {"mhn-noskip": build_mhn_noskip, "mhn": build_mhn, "mhn-d": build_mhn_d}[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}") from None
    return fn(b)


def attach_heads(g: ArchGraph, h: HeadSpec) -> ArchGraph:
    """Append a 5x3 conv and sibling 1x1 cls/reg convs to every declared output."""
    sigs = infer_signatures(g)
    nodes, heads = [], []
    for out in g.outputs:
        src = g.resolve(out)
        mid_ch = h.mid_channels or sigs[src].channels
        mid = NodeSpec(f"{out}/head", CONV, (src,), kernel=h.mid_kernel, padding=(2, 1), out_channels=mid_ch)
        act = NodeSpec(f"{out}/head_relu", RELU, (mid.id,))
        cls = NodeSpec(f"{out}/cls", CONV, (act.id,), out_channels=h.cls_channels)
        reg = NodeSpec(f"{out}/reg", CONV, (act.id,), out_channels=h.reg_channels)
        nodes += [mid, act, cls, reg]
        heads.append(Head(out, mid.id, cls.id, reg.id, h.anchors_per_branch))
    return g.with_nodes(nodes, heads=g.heads + tuple(heads))


def rcnn_source(g: ArchGraph) -> str:
    """Declared output with the smallest stride; ties go to the earliest one."""
    if not g.outputs:
        raise NoOutputs("graph declares no outputs")
    sigs = infer_signatures(g)
    return min(g.outputs, key=lambda o: sigs[g.resolve(o)].stride)


def attach_rcnn_head(g: ArchGraph, roi_size=(7, 7), fc_width: int = 256) -> ArchGraph:
    """Attach a Fast RCNN head (ROI pool -> fc -> fc -> cls/reg) to the finest output.

    The fully-connected stages act on the pooled grid flattened into
    channels, so they are 1x1 convolutions over a 1x1 map.
    """
    source = rcnn_source(g)
    channels = infer_signatures(g)[g.resolve(source)].channels
    oh, ow = roi_size
    if oh < 1 or ow < 1 or fc_width < 1:
        raise ValueError("roi_size and fc_width must be positive")
    sub = [
        NodeSpec("rcnn/input", INPUT),
        NodeSpec("rcnn/fc6", CONV, ("rcnn/input",), out_channels=fc_width),
        NodeSpec("rcnn/relu6", RELU, ("rcnn/fc6",)),
        NodeSpec("rcnn/fc7", CONV, ("rcnn/relu6",), out_channels=fc_width),
        NodeSpec("rcnn/relu7", RELU, ("rcnn/fc7",)),
        NodeSpec("rcnn/cls", CONV, ("rcnn/relu7",), out_channels=2),
        NodeSpec("rcnn/reg", CONV, ("rcnn/relu7",), out_channels=4),
    ]
    head_graph = ArchGraph(tuple(sub), ("rcnn/cls", "rcnn/reg"), channels * oh * ow, name="rcnn")
    head = RcnnHead(source, (oh, ow), fc_width, head_graph, "rcnn/cls", "rcnn/reg")
    from dataclasses import replace

    return replace(g, rcnn=head)


def build_detector(arch: str, b: BackboneSpec | None = None, anchors_per_branch: int = 3,
                   rcnn: bool = True, roi_size=(7, 7), fc_width: int = 256) -> ArchGraph:
    g = attach_heads(build(arch, b), HeadSpec(anchors_per_branch))
    if rcnn:
        g = attach_rcnn_head(g, roi_size, fc_width)
    return g
