"""Open-vocabulary image segmentation from class-agnostic masks and captions.

The model proposes soft segmentation masks for an image, pools region
features through them, and aligns regions with caption words contrastively;
at inference, arbitrary text queries score the regions and their masks vote
per pixel.
"""

__version__ = "0.1.0"
