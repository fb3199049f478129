import sys

from marta.cli import main


sys.exit(main())
