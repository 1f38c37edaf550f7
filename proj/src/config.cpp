namespace nlf {}
