""" Image datasets.

    Datasets hold their images in memory as one N x 3 x R x R float tensor in [-1, 1].  Real folders are read with
    Pillow (center crop to square, bilinear resize); the synthetic generator paints parameterized faces so every
    pipeline can run without a download.

    batches() is the only way training code draws images.  It is a pure function of (dataset, batch size, seed,
    start position): epoch e is shuffled with a generator seeded from (seed, e), so a resumed run can jump straight
    to any batch.
"""
import logging
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg')
PROFILES = ('photo', 'painterly', 'sketch')


class ImageDataset:
    """ In-memory image set; indexable, sized, and iterable in stored order. """
    def __init__(self, images: torch.Tensor, name: str = ''):
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[2] != images.shape[3]:
            raise ValueError(f"Expected N x 3 x R x R images, got {tuple(images.shape)}.")
        if images.shape[0] == 0:
            raise EmptyDataset(f"Dataset {name!r} holds no images.")
        self.images = images
        self.name = name

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, idx) -> torch.Tensor:
        return self.images[idx]

    def __iter__(self):
        return iter(self.images)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]


class ImageFolderDataset(ImageDataset):
    """ Images of a flat folder, sorted by file name. """
    def __init__(self, root: str, resolution: int, files: list[str], images: torch.Tensor):
        super().__init__(images, name=root)
        self.root = root
        self.files = files


def read_image(path: str, resolution: int) -> torch.Tensor:
    """ Decode one image to a 3 x R x R tensor in [-1, 1]: center crop to square, then bilinear resize. """
    with Image.open(path) as im:
        im = im.convert('RGB')
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if side != resolution:
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def load_folder(root: str, resolution: int) -> ImageFolderDataset:
    """ Load every PNG/JPEG of a flat folder.

        Args:
            root (str): Folder to read; nothing outside it is touched.
            resolution (int): Output resolution.
        Returns:
            ImageFolderDataset: Images in lexicographic file order.
        Raises:
            FileNotFoundError: root is not a directory.
            EmptyDataset: No file could be decoded.
    """
    if not os.path.isdir(root):
        raise FileNotFoundError(f"Image folder {root!r} does not exist.")
    names = sorted(n for n in os.listdir(root) if n.lower().endswith(IMAGE_EXTENSIONS))
    files, images = [], []
    for n in names:
        path = os.path.join(root, n)
        try:
            images.append(read_image(path, resolution))
        except (UnidentifiedImageError, OSError, ValueError) as e:
            logging.warning(f"Skipping undecodable image {path}: {e}")
            continue
        files.append(n)
    if not images:
        raise EmptyDataset(f"No decodable images in {root!r}.")
    logging.debug(f'Loaded {len(files)=} images from {root}.')
    return ImageFolderDataset(root, resolution, files, torch.stack(images))


def _epoch_order(n: int, seed: int, epoch: int) -> torch.Tensor:
    g = torch.Generator().manual_seed((seed * 1_000_003 + epoch) % (2 ** 63))
    return torch.randperm(n, generator=g)


def batches(dataset, batch_size: int, seed: int, epochs: int | None = None, start: int = 0) -> Iterator[torch.Tensor]:
    """ Deterministic stream of shuffled batches; the final partial batch of each epoch is dropped.

        Args:
            dataset: An ImageDataset.
            batch_size (int): Images per batch.
            seed (int): Shuffle seed.
            epochs (int): Number of epochs, or None for an endless stream.
            start (int): Index of the first batch to yield; earlier batches are skipped without being built.
        Yields:
            torch.Tensor: batch_size x 3 x R x R.
        Raises:
            BatchTooLarge: batch_size exceeds the dataset size.
    """
    if batch_size < 1:
        raise ValueError(f"Batch size must be positive, got {batch_size}.")
    n = len(dataset)
    if batch_size > n:
        raise BatchTooLarge(f"Batch size {batch_size} exceeds dataset size {n}.")
    per_epoch = n // batch_size
    epoch, offset = divmod(start, per_epoch)
    while epochs is None or epoch < epochs:
        order = _epoch_order(n, seed, epoch)
        for b in range(offset, per_epoch):
            yield dataset.images[order[b * batch_size:(b + 1) * batch_size]]
        offset = 0
        epoch += 1


@dataclass(frozen=True)
class SyntheticFaceDataset:
    """ Recipe for a procedurally painted face set. """
    seed: int = 0
    count: int = 8
    resolution: int = 64
    style_profile: str = 'photo'

    def __post_init__(self):
        if self.style_profile not in PROFILES:
            raise ValueError(f"Unknown style profile {self.style_profile!r}; expected one of {PROFILES}.")
        if self.count < 1:
            raise ValueError(f"Count must be positive, got {self.count}.")
        if self.resolution < 2:
            raise ValueError(f"Resolution must be at least 2, got {self.resolution}.")


# background, skin, hair, eye, mouth base colors in [0, 1]
_PALETTES = {
    'photo': ((0.78, 0.78, 0.80), (0.87, 0.70, 0.60), (0.30, 0.22, 0.16), (0.20, 0.15, 0.12), (0.70, 0.35, 0.35)),
    'painterly': ((0.18, 0.20, 0.38), (0.92, 0.62, 0.30), (0.55, 0.12, 0.10), (0.10, 0.25, 0.35), (0.85, 0.15, 0.20)),
    'sketch': ((0.95, 0.95, 0.95), (0.88, 0.88, 0.88), (0.35, 0.35, 0.35), (0.10, 0.10, 0.10), (0.30, 0.30, 0.30)),
}


def _ellipse(xx, yy, cx, cy, rx, ry):
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _paint_face(rng: np.random.Generator, resolution: int, profile: str) -> np.ndarray:
    bg, skin, hair, eye, mouth = (np.array(c) for c in _PALETTES[profile])
    jitter = 0.04 if profile != 'sketch' else 0.0
    bg, skin, hair = (np.clip(c + rng.normal(0, jitter, 3), 0, 1) for c in (bg, skin, hair))
    yy, xx = np.mgrid[0:resolution, 0:resolution] / (resolution - 1) * 2 - 1
    img = np.empty((resolution, resolution, 3))
    img[:] = bg
    # vertical background gradient
    img *= (1.0 - 0.15 * (yy[..., None] + 1) / 2)

    cx, cy = rng.uniform(-0.08, 0.08), rng.uniform(-0.05, 0.08)
    rx, ry = rng.uniform(0.42, 0.52), rng.uniform(0.55, 0.66)
    img[_ellipse(xx, yy, cx, cy - 0.12, rx * 1.12, ry * 0.95) & (yy < cy - 0.05)] = hair
    img[_ellipse(xx, yy, cx, cy, rx, ry)] = skin
    eye_dx, eye_y = rng.uniform(0.16, 0.22), cy - rng.uniform(0.08, 0.16)
    eye_r = rng.uniform(0.05, 0.08)
    for sx in (-1, 1):
        img[_ellipse(xx, yy, cx + sx * eye_dx, eye_y, eye_r * 1.4, eye_r)] = eye
    mouth_y = cy + rng.uniform(0.28, 0.36)
    img[_ellipse(xx, yy, cx, mouth_y, rng.uniform(0.12, 0.2), rng.uniform(0.03, 0.05))] = mouth

    if profile == 'painterly':
        angle = rng.uniform(0, np.pi)
        strokes = np.sin((xx * np.cos(angle) + yy * np.sin(angle)) * rng.uniform(18, 26) + rng.uniform(0, 2 * np.pi))
        img = img * (1 + 0.12 * strokes[..., None]) + rng.normal(0, 0.02, img.shape)
    elif profile == 'sketch':
        gray = img.mean(axis=2)
        # darken edges of the painted regions to mimic pencil strokes
        edges = np.abs(np.diff(gray, axis=0, prepend=gray[:1])) + np.abs(np.diff(gray, axis=1, prepend=gray[:, :1]))
        gray = np.clip(gray - 2.0 * edges, 0, 1) + rng.normal(0, 0.015, gray.shape)
        img = np.repeat(gray[..., None], 3, axis=2)
    else:
        img = img + rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0, 1)


def synth_generate(spec: SyntheticFaceDataset) -> ImageDataset:
    """ Paint spec.count faces; the same spec always yields bitwise identical images. """
    rng = np.random.default_rng(spec.seed)
    faces = np.stack([_paint_face(rng, spec.resolution, spec.style_profile) for _ in range(spec.count)])
    images = torch.from_numpy((faces * 2 - 1).astype(np.float32)).permute(0, 3, 1, 2).contiguous()
    return ImageDataset(images, name=f'synthetic-{spec.style_profile}-{spec.seed}')


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """ 3 x H x W in [-1, 1] to H x W x 3 uint8. """
    arr = ((image.detach().cpu().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def save_image(image: torch.Tensor, path: str):
    Image.fromarray(to_uint8(image), 'RGB').save(path, format='PNG')


def save_grid(rows: list[list[torch.Tensor]], path: str, pad: int = 2):
    """ Write a PNG grid, one list entry per row; every row has the same number of 3 x R x R cells.

        The layout mirrors a comparison figure: first column the input, then one column per variant.
    """
    if not rows or not rows[0]:
        raise ValueError("A grid needs at least one cell.")
    n_cols = len(rows[0])
    if any(len(r) != n_cols for r in rows):
        raise ValueError("All grid rows must have the same number of cells.")
    res = rows[0][0].shape[-1]
    canvas = np.full((len(rows) * (res + pad) + pad, n_cols * (res + pad) + pad, 3), 255, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, cell in enumerate(row):
            top, left = pad + i * (res + pad), pad + j * (res + pad)
            canvas[top:top + res, left:left + res] = to_uint8(cell)
    Image.fromarray(canvas, 'RGB').save(path, format='PNG')


def write_folder(dataset: ImageDataset, root: str, prefix: str = 'img'):
    os.makedirs(root, exist_ok=True)
    for i, image in enumerate(dataset):
        save_image(image, os.path.join(root, f'{prefix}_{i:05d}.png'))


class EmptyDataset(ValueError):
    """ Indicates a dataset or stream with no usable images. """
    pass


class BatchTooLarge(ValueError):
    """ Indicates a batch size larger than the dataset. """
    pass
