"""Action purpose learning: fuse pose, object appearance and human-object
layout of the support image into one purpose feature map."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from osad.errors import DataError

# softplus(_M_INIT) == 1, so edge importances start as all ones
_M_INIT = math.log(math.expm1(1.0))


class EmptyBoxError(DataError):
    pass


def normalize_adjacency(adjacency: torch.Tensor, importance: torch.Tensor) -> torch.Tensor:
    """``D^-1/2 (A * M + I) D^-1/2`` with the degree D taken from ``A + I``."""
    k = adjacency.shape[-1]
    eye = torch.eye(k, dtype=adjacency.dtype, device=adjacency.device)
    degree = (adjacency + eye).sum(-1)
    assert bool((degree > 0).all()), "zero-degree keypoint"
    d = degree.rsqrt()
    return d.unsqueeze(-1) * (adjacency * importance + eye) * d.unsqueeze(-2)


class PoseGCN(nn.Module):
    """Four residual graph-convolution layers over the skeleton, mean pooled.

    Keypoints arrive as ``(x, y, visibility)`` with coordinates normalized to
    [0, 1]; one linear layer lifts them to ``width`` channels first.
    """

    def __init__(self, adjacency, width: int, layers: int = 4, activation=F.relu):
        super().__init__()
        adjacency = torch.as_tensor(adjacency, dtype=torch.float32)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            raise ValueError("adjacency must be square")
        if not torch.equal(adjacency, adjacency.T):
            raise ValueError("adjacency must be symmetric")
        k = adjacency.shape[0]
        self.register_buffer("adjacency", adjacency * (1 - torch.eye(k)))
        self.edge_logits = nn.Parameter(torch.full((k, k), _M_INIT))
        self.embed = nn.Linear(3, width)
        self.layers = nn.ModuleList(nn.Linear(width, width, bias=False) for _ in range(layers))
        self.activation = activation

    @property
    def edge_importance(self) -> torch.Tensor:
        return F.softplus(self.edge_logits)

    def normalized_adjacency(self) -> torch.Tensor:
        return normalize_adjacency(self.adjacency, self.edge_importance)

    def forward(self, pose: torch.Tensor) -> torch.Tensor:
        """(B, K, 3) -> (B, width)."""
        a_hat = self.normalized_adjacency()
        h = self.embed(pose)
        for i, layer in enumerate(self.layers):
            h = self.activation(layer(a_hat @ h)) + h
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activations after GCN layer {i + 1}")
        return h.mean(dim=-2)


def rasterize_boxes(boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Normalized ``(x0, y0, x1, y1)`` boxes -> binary (B, 1, H, W) cell maps.

    A cell is inside when its centre is. A box too small to cover any centre
    is replaced by the 3x3 block around the cell holding the box centre.
    """
    boxes = boxes.to(torch.float64)
    cy = (torch.arange(height, dtype=torch.float64, device=boxes.device) + 0.5) / height
    cx = (torch.arange(width, dtype=torch.float64, device=boxes.device) + 0.5) / width
    x0, y0, x1, y1 = (boxes[:, i].view(-1, 1, 1) for i in range(4))
    inside = ((cx.view(1, 1, -1) >= x0) & (cx.view(1, 1, -1) <= x1)
              & (cy.view(1, -1, 1) >= y0) & (cy.view(1, -1, 1) <= y1))
    for b in range(boxes.shape[0]):
        if inside[b].any():
            continue
        col = int(torch.clamp((boxes[b, 0] + boxes[b, 2]) / 2 * width, 0, width - 1))
        row = int(torch.clamp((boxes[b, 1] + boxes[b, 3]) / 2 * height, 0, height - 1))
        inside[b, max(row - 1, 0):row + 2, max(col - 1, 0):col + 2] = True
        if not inside[b].any():
            raise EmptyBoxError(f"box {boxes[b].tolist()} covers no feature cell")
    return inside.unsqueeze(1).float()


def pose_branch(x: torch.Tensor, pose_vector: torch.Tensor, conv: nn.Module) -> torch.Tensor:
    """Broadcast the pooled pose vector over the grid, concatenate, convolve."""
    b, _, h, w = x.shape
    tiled = pose_vector.view(b, -1, 1, 1).expand(b, pose_vector.shape[-1], h, w)
    return conv(torch.cat([x, tiled], dim=1))


def purpose_attention(x: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
    """Softmax over all positions of <x_j, query>: (B, C, H, W), (B, C) -> (B, 1, H, W)."""
    b, c, h, w = x.shape
    logits = torch.einsum("bcl,bc->bl", x.reshape(b, c, h * w), query)
    return logits.softmax(dim=-1).view(b, 1, h, w)


def object_attention(x: torch.Tensor, box_map: torch.Tensor, conv: nn.Module):
    """Returns ``(attended features, attention, object descriptor)``."""
    cells = box_map.sum(dim=(-2, -1))
    if bool((cells <= 0).any()):
        raise EmptyBoxError("object box covers no feature cell")
    masked = conv(x * box_map)
    descriptor = (masked * box_map).sum(dim=(-2, -1)) / cells
    attn = purpose_attention(x, descriptor)
    return attn * x, attn, descriptor


def relative_position(human_map: torch.Tensor, object_map: torch.Tensor, conv: nn.Module) -> torch.Tensor:
    return conv(torch.cat([object_map, human_map], dim=1))


def fuse_purpose(pose_feat, object_feat, layout_feat, conv: nn.Module) -> torch.Tensor:
    if not (pose_feat.shape[-2:] == object_feat.shape[-2:] == layout_feat.shape[-2:]):
        raise ValueError("purpose branches disagree on spatial size")
    return pose_feat + conv(torch.cat([object_feat, layout_feat], dim=1))


def _conv3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1)


class ActionPurpose(nn.Module):
    def __init__(self, channels: int, adjacency, gcn_width: int | None = None):
        super().__init__()
        gcn_width = gcn_width or channels
        self.gcn = PoseGCN(adjacency, gcn_width)
        self.pose_conv = _conv3(channels + gcn_width, channels)
        self.object_conv = _conv3(channels, channels)
        self.layout_conv = _conv3(2, channels)
        self.fuse_conv = _conv3(2 * channels, channels)

    def forward(self, x, human_boxes, object_boxes, pose):
        """x: (B, C, H, W); boxes: (B, 4) normalized; pose: (B, K, 3) normalized."""
        h, w = x.shape[-2:]
        human_map = rasterize_boxes(human_boxes, h, w).to(x.dtype)
        object_map = rasterize_boxes(object_boxes, h, w).to(x.dtype)
        pose_feat = pose_branch(x, self.gcn(pose.to(x.dtype)), self.pose_conv)
        object_feat, _, _ = object_attention(x, object_map, self.object_conv)
        layout = relative_position(human_map, object_map, self.layout_conv)
        return fuse_purpose(pose_feat, object_feat, layout, self.fuse_conv)
