from django.apps import AppConfig


class SuperpixelsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'superpixels'
