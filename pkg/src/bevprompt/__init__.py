# coding: utf-8

__version__ = '0.1.0'


class BEVPromptProperties:
    """Keys shared by datasets, models and reports."""
    # order of the regression targets produced by a decode head
    target_names = ['depth', 'yaw_residual', 'log_w', 'log_h', 'log_l']


import bevprompt.errors
import bevprompt.utils
