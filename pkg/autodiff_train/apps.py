from django.apps import AppConfig


class AutodiffTrainConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "autodiff_train"
    verbose_name = "Differentiable subband training"
