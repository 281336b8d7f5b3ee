from django.apps import AppConfig


class GeosegConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'geoseg'
