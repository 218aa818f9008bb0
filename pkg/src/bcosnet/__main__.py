import sys

from bcosnet.cli import main

sys.exit(main())
