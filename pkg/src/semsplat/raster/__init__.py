from .render import (DegenerateCovariance, RenderGradients, RenderOutput, RenderSettings, render,
                     render_backward)

__all__ = ["DegenerateCovariance", "RenderGradients", "RenderOutput", "RenderSettings", "render",
           "render_backward"]
