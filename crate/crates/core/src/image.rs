use crate::error::{Error, Result};

/// Planar `V×C×H×W` stack of images or feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    views: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(views: usize, channels: usize, height: usize, width: usize) -> Self {
        Self::filled(views, channels, height, width, 0.0)
    }

    pub fn filled(views: usize, channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            views,
            channels,
            height,
            width,
            data: vec![value; views * channels * height * width],
        }
    }

    pub fn from_vec(
        views: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expected = views * channels * height * width;
        if data.len() != expected {
            return Err(Error::dim(
                "ImageTensor::from_vec",
                (views, channels, height, width),
                data.len(),
            ));
        }
        Ok(Self {
            views,
            channels,
            height,
            width,
            data,
        })
    }

    /// Stacks single-view tensors with matching `C×H×W` along the view axis.
    pub fn stack(parts: &[ImageTensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Ok(Self::zeros(0, 0, 0, 0));
        };
        let mut data = Vec::new();
        let mut views = 0;
        for p in parts {
            if (p.channels, p.height, p.width) != (first.channels, first.height, first.width) {
                return Err(Error::dim("ImageTensor::stack", first.shape(), p.shape()));
            }
            views += p.views;
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(views, first.channels, first.height, first.width, data)
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.views, self.channels, self.height, self.width)
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, v: usize, c: usize, y: usize, x: usize) -> usize {
        ((v * self.channels + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, v: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(v, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, v: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(v, c, y, x);
        self.data[i] = value;
    }

    /// Copy of one view as a `1×C×H×W` tensor.
    pub fn view(&self, v: usize) -> ImageTensor {
        let plane = self.channels * self.height * self.width;
        ImageTensor {
            views: 1,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data[v * plane..(v + 1) * plane].to_vec(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::RejectedInput(format!(
                "non-finite image value at flat index {i}"
            )));
        }
        Ok(())
    }
}
