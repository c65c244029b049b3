"""Pluggable backbones.

Contract: an ``nn.Module`` mapping images (B, C, H, W) to logits (B, N), with
a submodule named by ``embedding_layer`` whose output is the image embedding
of size ``embedding_dim``.
"""

import torch.nn as nn

from .exceptions import InvalidInputError


def _block(cin, cout, pool=True):
    layers = [nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(4, cout), nn.ReLU(inplace=True)]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class TinyCNN(nn.Module):
    """Three conv blocks, a pooled embedding layer and a linear age head.

    GroupNorm keeps every forward pass per-sample, so train and eval mode
    behave identically and there are no running statistics.
    """

    embedding_layer = "embedding"

    def __init__(self, num_classes=101, in_channels=1, width=16, embedding_dim=64, image_size=32):
        super().__init__()
        self.in_channels = in_channels
        self.image_size = image_size
        self.embedding_dim = embedding_dim
        self.features = nn.Sequential(
            _block(in_channels, width),
            _block(width, 2 * width),
            _block(2 * width, 4 * width, pool=False),
        )
        self.embedding = nn.Sequential(
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(4 * width, embedding_dim), nn.ReLU(inplace=True)
        )
        self.head = nn.Linear(embedding_dim, num_classes)

    def forward(self, x):
        return self.head(self.embedding(self.features(x)))


class VGG16Age(nn.Module):
    """VGG-16 with its last classifier layer replaced by an age head.

    ``pretrained=True`` loads torchvision's ImageNet weights (downloaded on
    first use). Intended for full-scale runs on 224x224 RGB faces.
    """

    embedding_layer = "embedding"
    embedding_dim = 4096

    def __init__(self, num_classes=101, in_channels=3, image_size=224, pretrained=False):
        super().__init__()
        try:
            from torchvision.models import VGG16_Weights, vgg16
        except ImportError:
            raise ImportError("the vgg16 backbone needs torchvision: pip install 'artifact[vgg]'") from None

        if in_channels != 3:
            raise InvalidInputError("vgg16 expects 3 input channels")
        base = vgg16(weights=VGG16_Weights.IMAGENET1K_V1 if pretrained else None)
        self.in_channels = in_channels
        self.image_size = image_size
        self.features = base.features
        self.pool = base.avgpool
        self.embedding = nn.Sequential(nn.Flatten(), *list(base.classifier.children())[:-1])
        self.head = nn.Linear(4096, num_classes)

    def forward(self, x):
        return self.head(self.embedding(self.pool(self.features(x))))


BACKBONES = {"tiny_cnn": TinyCNN, "vgg16": VGG16Age}


def build_backbone(spec, num_classes):
    """Instantiate from a config mapping like ``{"name": "tiny_cnn", "image_size": 32}``."""
    spec = dict(spec)
    name = spec.pop("name", "tiny_cnn")
    if name not in BACKBONES:
        raise InvalidInputError(f"unknown backbone {name!r}; expected one of {sorted(BACKBONES)}")
    return BACKBONES[name](num_classes=num_classes, **spec)
