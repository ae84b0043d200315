"""Regenerates the constants in tests/pretrained_golden.rs.

Fills a torchvision ResNet50 with closed-form weights (reproduced in the Rust
test), runs stem and stages 1-3 in eval mode on a closed-form 64x64 image and
prints the spatially averaged stage-3 activations of a few channels.
"""
import math

import torch
import torchvision


def phase(name):
    return (sum(name.encode()) % 97) * 0.1


def fill(name, shape):
    n = math.prod(shape)
    s = torch.sin(0.7 * torch.arange(n, dtype=torch.float64) + phase(name))
    leaf = name.rsplit(".", 1)[1]
    if len(shape) == 4:
        v = s * math.sqrt(2.0 / (shape[1] * shape[2] * shape[3]))
    elif leaf == "weight":
        v = 0.5 + 0.1 * s
    elif leaf == "bias":
        v = 0.1 * s
    elif leaf == "running_mean":
        v = 0.05 * s
    elif leaf == "running_var":
        v = 1.0 + 0.5 * s.abs()
    else:
        raise ValueError(name)
    return v.float().reshape(shape)


def main():
    torch.set_grad_enabled(False)
    net = torchvision.models.resnet50()
    state = net.state_dict()
    for name, t in state.items():
        if name.endswith("num_batches_tracked") or name.startswith("fc."):
            continue
        t.copy_(fill(name, tuple(t.shape)))
    net.eval()
    n = 3 * 64 * 64
    x = (1.5 * torch.sin(0.013 * torch.arange(n, dtype=torch.float64))).float().reshape(1, 3, 64, 64)
    y = net.maxpool(net.relu(net.bn1(net.conv1(x))))
    y = net.layer3(net.layer2(net.layer1(y)))
    gap = y.mean(dim=(2, 3))[0]
    for c in [0, 1, 2, 3, 4, 511, 1019, 1023]:
        print(f"({c}, {gap[c].item():.9e}),")


if __name__ == "__main__":
    main()
