# repositories package
