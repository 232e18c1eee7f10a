"""Scene dataset directory layout.

::

    root/
      classes.txt            # one prompt-class name per line; id = index + 1
      scene_0000/
        trajectory.txt       # cameras, one per line (cameras text format)
        class.txt            # the scene's class name
        frame_000.png ...    # one 8-bit sRGB frame per camera

Class id 0 is reserved for the null (unconditional) condition and never
appears in datasets.
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..cameras import Trajectory, load_trajectory, save_trajectory
from ..errors import DataFormatError, MissingArtifactError


def save_png(path, image):
    """Image in [0, 1], (H, W, 3) float -> 8-bit sRGB PNG."""
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


@dataclass
class SceneData:
    trajectory: Trajectory
    frames: np.ndarray  # (M, H, W, 3) float32 in [0, 1]
    class_id: int
    class_name: str
    path: str = ""


def write_classes(root, class_names):
    with open(os.path.join(root, "classes.txt"), "w") as f:
        f.write("\n".join(class_names) + "\n")


def read_classes(root):
    path = os.path.join(root, "classes.txt")
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing classes.txt in {root}")
    with open(path) as f:
        names = [ln.strip() for ln in f if ln.strip()]
    if not names:
        raise DataFormatError(f"{path}: no classes listed")
    return names


def write_scene(scene_dir, trajectory, frames, class_name):
    os.makedirs(scene_dir, exist_ok=True)
    save_trajectory(os.path.join(scene_dir, "trajectory.txt"), trajectory)
    with open(os.path.join(scene_dir, "class.txt"), "w") as f:
        f.write(class_name + "\n")
    for i, frame in enumerate(frames):
        save_png(os.path.join(scene_dir, f"frame_{i:03d}.png"), frame)


def load_scene(scene_dir, class_ids, require_normalized=True) -> SceneData:
    traj = load_trajectory(os.path.join(scene_dir, "trajectory.txt"))
    if require_normalized and not traj.is_normalized():
        raise DataFormatError(f"{scene_dir}: trajectory is not normalized")
    with open(os.path.join(scene_dir, "class.txt")) as f:
        class_name = f.read().strip()
    if class_name not in class_ids:
        raise DataFormatError(f"{scene_dir}: unknown class {class_name!r}")
    frame_files = sorted(
        f for f in os.listdir(scene_dir) if f.startswith("frame_") and f.endswith(".png")
    )
    if len(frame_files) != len(traj):
        raise DataFormatError(
            f"{scene_dir}: {len(frame_files)} frames for {len(traj)} cameras"
        )
    frames = np.stack([load_png(os.path.join(scene_dir, f)) for f in frame_files])
    return SceneData(traj, frames, class_ids[class_name], class_name, scene_dir)


def load_dataset(root, require_normalized=True):
    """Returns (scenes, class_names). Class ids start at 1; 0 is the null class."""
    if not os.path.isdir(root):
        raise MissingArtifactError(f"dataset directory not found: {root}")
    class_names = read_classes(root)
    class_ids = {name: i + 1 for i, name in enumerate(class_names)}
    scene_dirs = sorted(
        os.path.join(root, d) for d in os.listdir(root)
        if os.path.isdir(os.path.join(root, d))
    )
    scenes = [load_scene(d, class_ids, require_normalized) for d in scene_dirs]
    if not scenes:
        raise DataFormatError(f"{root}: dataset contains no scenes")
    return scenes, class_names
