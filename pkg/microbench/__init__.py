# Initialize the microbench package
from microbench.micronet import build_microbotnet, count_macs
from microbench.odometry import VoConfig, noise_sweep, run_vo
from microbench.scenes import bundled_scene, load_kitti

__version__ = "0.1.0"

__all__ = [
    'build_microbotnet',
    'bundled_scene',
    'count_macs',
    'load_kitti',
    'noise_sweep',
    'run_vo',
    'VoConfig',
]
