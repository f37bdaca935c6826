"""
場景渲染
以 SVG 畫出節點相關度：軌跡為實線、地圖為虛線，並疊上真值與預測
"""

import logging
from pathlib import Path
from typing import Optional, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
from matplotlib.collections import LineCollection
import numpy as np

from attribution import AttributionResult, aggregate_by_vector
from scenario_core import GraphInput, PredictionCase

logger = logging.getLogger(__name__)

SVG_HASH_SALT = 'vecprobe'
RELEVANCE_CMAP = 'Reds'


def render_scene(case: PredictionCase, graph: GraphInput, result: AttributionResult,
                 prediction: Optional[np.ndarray], path: Union[str, Path],
                 title: Optional[str] = None) -> Path:
    """
    輸出單一樣本的歸因 SVG

    相關度以第 99 百分位數截斷後映射到色階；SVG 不含時間戳記，
    相同輸入產生逐位元相同的檔案。
    """
    relevance = aggregate_by_vector(result)
    cmap = plt.get_cmap(RELEVANCE_CMAP)
    matrix = graph.node_matrix
    segments = np.stack([matrix[:, 0:2], matrix[:, 2:4]], axis=1)
    trajectory = np.array([k.is_trajectory for k in graph.node_kinds])

    with plt.rc_context({'svg.hashsalt': SVG_HASH_SALT, 'svg.fonttype': 'none'}):
        fig, ax = plt.subplots(figsize=(8, 8))
        for mask, style, width in ((~trajectory, 'dashed', 1.2), (trajectory, 'solid', 2.4)):
            if not mask.any():
                continue
            colors = cmap(0.15 + 0.85 * relevance.shade[mask])
            ax.add_collection(LineCollection(segments[mask], colors=colors,
                                             linestyles=style, linewidths=width))

        valid = case.future_mask
        ax.plot(case.future_truth[valid, 0], case.future_truth[valid, 1],
                color='tab:green', linewidth=1.5, label='ground truth')
        if prediction is not None:
            ax.plot(prediction[:, 0], prediction[:, 1], color='tab:blue',
                    linewidth=1.5, linestyle='-.', label='prediction')

        ax.autoscale_view()
        ax.set_aspect('equal', adjustable='datalim')
        ax.set_title(title or f"{case.case_key}  (p99 = {relevance.normalizer:.3g})")
        ax.legend(loc='upper right')
        path = Path(path)
        fig.savefig(path, format='svg', metadata={'Date': None})
        plt.close(fig)

    logger.info(f"scene rendered to {path}")
    return path
