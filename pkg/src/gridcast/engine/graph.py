"""Recorded-forward computation graph with exact reverse-mode gradients.

A :class:`Graph` is a tape: each operator call appends a node holding the
op kind, the input node ids (always earlier in the list, so the tape is
topologically ordered by construction), the computed value, and whatever
the backward pass needs. Parameters are named leaf nodes; each name may be
bound at most once per forward pass. ``backward(loss)`` walks the tape in
reverse and returns one gradient array per parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import ops


class GraphError(RuntimeError):
    """Misuse of the recording tape (bad node id, duplicate parameter, ...)."""


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    ctx: dict[str, Any] = field(default_factory=dict)
    param_name: str | None = None
    needs_grad: bool = False


class Graph:
    """Single-writer forward tape over the engine's operator set."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}

    # -- node bookkeeping ---------------------------------------------------

    def _add(self, op: str, inputs: tuple[int, ...], value: np.ndarray, **ctx: Any) -> int:
        nid = len(self.nodes)
        for i in inputs:
            if not 0 <= i < nid:
                raise GraphError(f"{op}: input node {i} does not precede node {nid}")
        needs = op == "param" or any(self.nodes[i].needs_grad for i in inputs)
        self.nodes.append(Node(op, inputs, value, ctx, needs_grad=needs))
        return nid

    def value(self, nid: int) -> np.ndarray:
        self._check_id(nid)
        return self.nodes[nid].value

    def _check_id(self, nid: int) -> None:
        if not 0 <= nid < len(self.nodes):
            raise GraphError(f"node {nid} has not been recorded by a forward pass")

    # -- leaves ---------------------------------------------------------------

    def input(self, value: np.ndarray) -> int:
        return self._add("input", (), np.asarray(value))

    def param(self, name: str, value: np.ndarray) -> int:
        if name in self.params:
            raise GraphError(f"parameter {name!r} already bound in this forward pass")
        nid = self._add("param", (), np.asarray(value))
        self.nodes[nid].param_name = name
        self.params[name] = nid
        return nid

    # -- operators ------------------------------------------------------------

    def conv2d(self, x: int, w: int, b: int, pad: int = 1) -> int:
        y, cols = ops.conv2d(self.value(x), self.value(w), self.value(b), pad, return_cols=True)
        return self._add("conv2d", (x, w, b), y, pad=pad, cols=cols)

    def conv_transpose2d(self, x: int, w: int, b: int) -> int:
        y = ops.conv_transpose2d(self.value(x), self.value(w), self.value(b))
        return self._add("conv_transpose2d", (x, w, b), y)

    def maxpool2(self, x: int) -> int:
        y, idx = ops.maxpool2(self.value(x))
        return self._add("maxpool2", (x,), y, idx=idx, x_shape=self.value(x).shape)

    def group_norm(
        self, x: int, gamma: int, beta: int, channels_per_group: int, eps: float = 1e-5
    ) -> int:
        y, xhat, inv = ops._group_norm_impl(
            self.value(x), self.value(gamma), self.value(beta), channels_per_group, eps
        )
        return self._add(
            "group_norm", (x, gamma, beta), y, xhat=xhat, inv=inv, cpg=channels_per_group
        )

    def relu(self, x: int) -> int:
        return self._add("relu", (x,), ops.relu(self.value(x)))

    def concat_channels(self, a: int, b: int) -> int:
        y = ops.concat_channels(self.value(a), self.value(b))
        return self._add("concat_channels", (a, b), y, c1=self.value(a).shape[-3])

    def pad_to_multiple(self, x: int, m: int) -> int:
        y, rec = ops.pad_to_multiple(self.value(x), m)
        return self._add("pad_to_multiple", (x,), y, rec=rec)

    def crop_to(self, x: int, rec: ops.CropRecord) -> int:
        y = ops.crop_to(self.value(x), rec)
        return self._add("crop_to", (x,), y, padded_shape=self.value(x).shape)

    def mse(self, pred: int, target: int) -> int:
        loss = ops.mse(self.value(pred), self.value(target))
        return self._add("mse", (pred, target), np.float64(loss))

    # -- reverse pass -----------------------------------------------------------

    def backward(self, loss: int) -> dict[str, np.ndarray]:
        """Reverse-mode gradients of the scalar node ``loss`` w.r.t. every parameter.

        Parameters that do not influence the loss get a zero gradient of
        their own shape.
        """
        self._check_id(loss)
        loss_value = np.asarray(self.nodes[loss].value)
        if loss_value.size != 1:
            raise GraphError(f"backward: loss node has shape {loss_value.shape}, expected scalar")

        grads: dict[int, np.ndarray] = {loss: np.ones((), dtype=np.float64)}
        for nid in range(loss, -1, -1):
            if nid not in grads:
                continue
            node = self.nodes[nid]
            dy = grads.pop(nid) if nid != loss else grads[nid]
            if node.op in ("input", "param"):
                grads[nid] = dy
                continue
            for in_id, g in zip(node.inputs, self._vjp(node, dy)):
                if g is None or not self.nodes[in_id].needs_grad:
                    continue
                if in_id in grads:
                    grads[in_id] = grads[in_id] + g
                else:
                    grads[in_id] = g

        out: dict[str, np.ndarray] = {}
        for name, nid in self.params.items():
            g = grads.get(nid)
            if g is None:
                g = np.zeros_like(self.nodes[nid].value)
            out[name] = g
        return out

    def _vjp(self, node: Node, dy: np.ndarray) -> tuple[np.ndarray, ...]:
        v = lambda i: self.nodes[i].value  # noqa: E731
        if node.op == "conv2d":
            x, w, _ = node.inputs
            dy = dy.astype(v(x).dtype, copy=False)
            return ops.conv2d_backward(
                dy, v(x), v(w), node.ctx["pad"], node.ctx["cols"],
                need_dx=self.nodes[x].needs_grad,
            )
        if node.op == "conv_transpose2d":
            x, w, _ = node.inputs
            dy = dy.astype(v(x).dtype, copy=False)
            return ops.conv_transpose2d_backward(dy, v(x), v(w))
        if node.op == "maxpool2":
            return (ops.maxpool2_backward(dy, node.ctx["idx"], node.ctx["x_shape"]),)
        if node.op == "group_norm":
            x, gamma, _ = node.inputs
            return ops.group_norm_backward(
                dy, node.ctx["xhat"], node.ctx["inv"], v(gamma), node.ctx["cpg"]
            )
        if node.op == "relu":
            return (ops.relu_backward(dy, v(node.inputs[0])),)
        if node.op == "concat_channels":
            return ops.concat_channels_backward(dy, node.ctx["c1"])
        if node.op == "pad_to_multiple":
            return (ops.crop_to(dy, node.ctx["rec"]),)
        if node.op == "crop_to":
            return (ops.crop_to_backward(dy, node.ctx["padded_shape"]),)
        if node.op == "mse":
            pred, target = node.inputs
            return ops.mse_backward(float(dy), v(pred), v(target))
        raise GraphError(f"no gradient rule for op {node.op!r}")
