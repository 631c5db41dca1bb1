# Package marker for the tiny models.  Import submodules directly
# (``models.networks``, ``models.training``, ``models.model_manager``);
# ``selfsup.dynamic_conv`` depends on ``models.layers``.
