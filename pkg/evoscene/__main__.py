from evoscene.cli import main

main()
