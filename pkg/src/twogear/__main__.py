import sys

from twogear.cli import main

sys.exit(main())
