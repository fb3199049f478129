from marta.core import Marta
